"""Canonical key=value tree serialization for configs.

Nested dicts and lists flatten to sorted dotted-key lines::

    encoder.0.kind = conv_block
    encoder.0.filters = 32
    optimizer.lr = 0.0001

The format round-trips losslessly: ints, floats, booleans and bare strings
are distinguished by literal syntax, floats are written with ``repr``.
"""

from __future__ import annotations

from .errors import ConfigError

Scalar = int | float | bool | str


def _format_scalar(v: Scalar) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        if "\n" in v or "=" in v or v != v.strip() or v == "":
            raise ConfigError(f"string value not representable: {v!r}")
        return v
    raise ConfigError(f"unsupported config value type: {type(v).__name__}")


def _parse_scalar(s: str) -> Scalar:
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def flatten(tree, prefix: str = "") -> dict[str, Scalar]:
    flat: dict[str, Scalar] = {}
    if isinstance(tree, dict):
        if not tree:
            raise ConfigError(f"empty dict not representable at {prefix!r}")
        for k, v in tree.items():
            if not isinstance(k, str) or "." in k or "=" in k or not k:
                raise ConfigError(f"invalid config key: {k!r}")
            key = f"{prefix}.{k}" if prefix else k
            flat.update(flatten(v, key))
    elif isinstance(tree, (list, tuple)):
        if len(tree) == 0:
            raise ConfigError(f"empty list not representable at {prefix!r}")
        for i, v in enumerate(tree):
            flat.update(flatten(v, f"{prefix}.{i}" if prefix else str(i)))
    else:
        flat[prefix] = tree
    return flat


def unflatten(flat: dict[str, Scalar]):
    """Rebuild the nested tree; contiguous 0..n-1 integer keys become lists."""
    root: dict = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = root
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"key conflict at {key!r}")
        if parts[-1] in node:
            raise ConfigError(f"duplicate key {key!r}")
        node[parts[-1]] = value

    def listify(node):
        if not isinstance(node, dict):
            return node
        node = {k: listify(v) for k, v in node.items()}
        if node and all(k.isdigit() for k in node):
            idx = sorted(int(k) for k in node)
            if idx == list(range(len(idx))):
                return [node[str(i)] for i in idx]
        return node

    return listify(root)


def dumps(tree) -> str:
    flat = flatten(tree)
    return "".join(f"{k} = {_format_scalar(v)}\n" for k, v in sorted(flat.items()))


def loads(text: str):
    flat: dict[str, Scalar] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key or key in flat:
            raise ConfigError(f"line {lineno}: bad or duplicate key {key!r}")
        flat[key] = _parse_scalar(value.strip())
    return unflatten(flat)
