"""Named counter-based random streams.

Every stochastic consumer gets its own Philox stream keyed by
(run seed, stream id), where the stream id is a stable 64-bit hash of the
stream name. Philox is counter-based, so stream state serializes to a few
integers and restores exactly, which is what checkpoint resume relies on.
"""

from __future__ import annotations

import zlib

import numpy as np


def _stream_id(name: str) -> int:
    data = name.encode("utf-8")
    return (zlib.crc32(data) << 32) | zlib.crc32(data[::-1] + b"#")


def make_stream(seed: int, name: str) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(_stream_id(name))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class StreamHub:
    """Lazily created named streams for one run, with exact state capture."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = make_stream(self.seed, name)
            self._streams[name] = gen
        return gen

    def state(self) -> dict:
        out = {"seed": self.seed, "streams": {}}
        for name, gen in sorted(self._streams.items()):
            st = gen.bit_generator.state
            out["streams"][name] = {
                "counter": [int(v) for v in st["state"]["counter"]],
                "key": [int(v) for v in st["state"]["key"]],
                "buffer": [int(v) for v in st["buffer"]],
                "buffer_pos": int(st["buffer_pos"]),
                "has_uint32": int(st["has_uint32"]),
                "uinteger": int(st["uinteger"]),
            }
        return out

    def load_state(self, state: dict):
        self.seed = int(state["seed"])
        self._streams.clear()
        for name, st in state["streams"].items():
            gen = make_stream(self.seed, name)
            full = gen.bit_generator.state
            full["state"]["counter"] = np.array(st["counter"], dtype=np.uint64)
            full["state"]["key"] = np.array(st["key"], dtype=np.uint64)
            full["buffer"] = np.array(st["buffer"], dtype=np.uint64)
            full["buffer_pos"] = st["buffer_pos"]
            full["has_uint32"] = st["has_uint32"]
            full["uinteger"] = st["uinteger"]
            gen.bit_generator.state = full
            self._streams[name] = gen
