import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from PyVPBLab.collision_core import (CollisionOperator, KernelConfig, assemble_operator, kernel_config_hash,
                                     kernel_fingerprint, null_space_leakage)
from PyVPBLab.velocity_space import VelocityGrid

logger = logging.getLogger(__name__)

MAGIC = b"VPBK"
FORMAT_VERSION = 1

# magic, version, gamma, R, n, n_theta, n_phi, c_q, local correction flag,
# symmetrization residual, clipped fraction, sha256 of the payload
HEADER = struct.Struct("<4sHddiiid?dd32s")


class KernelCacheError(RuntimeError):
    pass


class KernelCache:
    """
    Binary store of assembled collision operators, one file per kernel configuration.
    The payload is nu followed by K, little-endian float64.
    """

    def __init__(self, directory):
        self.directory = Path(directory)

    @staticmethod
    def cache_key(grid: VelocityGrid, config: KernelConfig) -> str:
        fingerprint = dict(kernel_fingerprint(grid, config), format_version=FORMAT_VERSION)
        return hashlib.sha256(json.dumps(fingerprint, sort_keys=True).encode("utf-8")).hexdigest()

    def path_for(self, grid: VelocityGrid, config: KernelConfig) -> Path:
        return self.directory / "kernel-{}.vpbk".format(self.cache_key(grid, config)[:16])

    @staticmethod
    def save(op: CollisionOperator, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = np.concatenate([op.nu, op.K.ravel()]).astype("<f8").tobytes()
        header = HEADER.pack(MAGIC, FORMAT_VERSION, op.config.gamma, op.grid.extent, op.grid.n,
                             op.config.n_theta, op.config.n_phi, op.config.c_q, op.config.local_correction,
                             op.metadata["symmetrization_residual"], op.metadata["clipped_fraction"],
                             hashlib.sha256(payload).digest())
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as stream:
            stream.write(header)
            stream.write(payload)
        tmp.replace(path)
        return path

    @staticmethod
    def load(path, grid: VelocityGrid, config: KernelConfig) -> CollisionOperator:
        path = Path(path)
        with open(path, "rb") as stream:
            raw_header = stream.read(HEADER.size)
            payload = stream.read()
        if len(raw_header) < HEADER.size:
            raise KernelCacheError("Kernel cache {} is truncated.".format(path))
        (magic, version, gamma, extent, n, n_theta, n_phi, c_q, local, residual, clipped,
         checksum) = HEADER.unpack(raw_header)
        if magic != MAGIC:
            raise KernelCacheError("Kernel cache {} has bad magic {!r}.".format(path, magic))
        if version != FORMAT_VERSION:
            raise KernelCacheError("Kernel cache {} has format version {}, expected {}.".format(
                path, version, FORMAT_VERSION))
        stored = {"gamma": gamma, "c_q": c_q, "extent": extent, "n": n, "n_theta": n_theta, "n_phi": n_phi,
                  "local_correction": local}
        expected = kernel_fingerprint(grid, config)
        mismatched = sorted(k for k in expected if expected[k] != stored[k])
        if mismatched:
            raise KernelCacheError("Kernel cache {} does not match the configuration in: {}.".format(
                path, ", ".join(mismatched)))
        if hashlib.sha256(payload).digest() != checksum:
            raise KernelCacheError("Kernel cache {} failed its checksum.".format(path))
        values = np.frombuffer(payload, dtype="<f8")
        N = grid.size
        if values.size != N + N * N:
            raise KernelCacheError("Kernel cache {} holds {} values, expected {}.".format(path, values.size, N + N * N))
        metadata = {
            "config_hash": kernel_config_hash(grid, config),
            "n_theta": n_theta,
            "n_phi": n_phi,
            "symmetrization_residual": residual,
            "clipped_fraction": clipped,
        }
        op = CollisionOperator(grid=grid, config=config, nu=values[:N].copy(), K=values[N:].reshape(N, N).copy(),
                               metadata=metadata)
        metadata["null_space_leakage"] = null_space_leakage(op)
        return op

    def load_or_assemble(self, grid: VelocityGrid, config: KernelConfig,
                         threads: int = 1) -> Tuple[CollisionOperator, bool]:
        """
        :return: the operator and whether it came from the cache.
        """
        path = self.path_for(grid, config)
        if path.is_file():
            try:
                op = self.load(path, grid, config)
                logger.info("Kernel cache hit: %s", path)
                return op, True
            except KernelCacheError as error:
                logger.warning("Discarding kernel cache: %s", error)
        logger.info("Kernel cache miss: %s", path)
        op = assemble_operator(grid, config, threads)
        self.save(op, path)
        return op, False
