import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="PyVPBLab",
    version="0.1.0",
    description="A numerical laboratory for the Vlasov-Poisson-Boltzmann system with soft potentials.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages("src"),
    package_dir={"": "src"},
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    install_requires=[
        'numpy',
        'scipy',
        'joblib'
    ],
    entry_points={
        'console_scripts': ['vpblab=PyVPBLab.cli:main'],
    },
    python_requires='>=3.8',
)
