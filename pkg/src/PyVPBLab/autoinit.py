from typing import Any, Dict, List


class ConfigError(ValueError):
    """
    Raised when a configuration object is invalid.
    Carries every violation that was found, not only the first one.
    """

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("Invalid configuration:\n  " + "\n  ".join(self.violations))


class AutoInit:
    """
    Base class for configuration objects.
    Defaults are declared as annotated class attributes and overridden by keyword arguments.
    Unknown keywords, values that cannot be coerced to the annotated type,
    and whatever the subclass reports from violations() are collected and raised together.
    """

    def __init__(self, **args):
        problems = []
        annotations = self.fields()
        for (k, v) in args.items():
            if not hasattr(self, k):
                problems.append("Unknown attribute: {}".format(k))
                continue
            try:
                setattr(self, k, _coerce(annotations.get(k), v))
            except (TypeError, ValueError):
                problems.append("Attribute {} expects {}, got {!r}".format(k, annotations[k].__name__, v))
        if not problems:
            problems = self.violations()
        if problems:
            raise ConfigError(problems)

    @classmethod
    def fields(cls) -> Dict[str, type]:
        annotations = {}
        for klass in reversed(cls.__mro__):
            annotations.update(klass.__dict__.get("__annotations__", {}))
        return annotations

    def violations(self) -> List[str]:
        """
        To be overriden by configurations with constraints.
        :return: one message per broken constraint.
        """
        return []

    def as_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.fields()}

    def replace(self, **changes):
        values = self.as_dict()
        values.update(changes)
        return type(self)(**values)

    def __repr__(self):
        return "{}({})".format(type(self).__name__,
                               ", ".join("{}={!r}".format(k, v) for (k, v) in self.as_dict().items()))


def _coerce(annotation, value):
    if annotation is bool:
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return bool(value)
    if annotation is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return int(value)
    if annotation is float:
        return float(value)
    if annotation is str:
        return str(value)
    if annotation is tuple:
        if isinstance(value, str):
            value = [item for item in value.split(",") if item.strip()]
        return tuple(float(item) for item in value)
    return value
