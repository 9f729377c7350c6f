import hashlib
import re

import numpy as np

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics, dropping empty tokens."""
    return _TOKEN_RE.findall(text.lower())


def derive_seed(seed: int, *labels) -> int:
    # stable across processes, unlike hash()
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def rng_for(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))


def format_floats(values) -> str:
    # repr() round-trips float64 exactly
    return ",".join(repr(float(v)) for v in values)


def parse_floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


def parse_header(line: str) -> dict[str, str]:
    fields = {}
    for part in line.split():
        key, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"malformed header field {part!r}")
        fields[key] = value
    return fields
