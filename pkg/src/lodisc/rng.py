"""Named, seedable counter-based random streams.

Every stochastic op in the package draws from an explicitly passed
``numpy.random.Generator`` backed by Philox. Streams are derived from a
(seed, name) pair so that independent subsystems never share draws, and
the full generator state round-trips through JSON for checkpointing.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "state_to_json", "state_from_json"]


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the Philox stream identified by (seed, name)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name),))
    return np.random.Generator(np.random.Philox(ss))


def state_to_json(gen: np.random.Generator) -> dict:
    """Generator state as a JSON-compatible dict."""
    s = gen.bit_generator.state
    return {
        "bit_generator": s["bit_generator"],
        "counter": [int(v) for v in s["state"]["counter"]],
        "key": [int(v) for v in s["state"]["key"]],
        "buffer": [int(v) for v in s["buffer"]],
        "buffer_pos": int(s["buffer_pos"]),
        "has_uint32": int(s["has_uint32"]),
        "uinteger": int(s["uinteger"]),
    }


def state_from_json(blob: dict) -> np.random.Generator:
    """Rebuild a generator whose next draws continue the saved stream."""
    if blob.get("bit_generator") != "Philox":
        raise ValueError(f"unsupported bit generator {blob.get('bit_generator')!r}")
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(blob["counter"], dtype=np.uint64),
            "key": np.array(blob["key"], dtype=np.uint64),
        },
        "buffer": np.array(blob["buffer"], dtype=np.uint64),
        "buffer_pos": blob["buffer_pos"],
        "has_uint32": blob["has_uint32"],
        "uinteger": blob["uinteger"],
    }
    return np.random.Generator(bg)
