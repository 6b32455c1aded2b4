"""Named, counter-based random streams.

Every stochastic draw in training and inference goes through a stream keyed by
``(seed, purpose)``. Streams are numpy ``Generator`` objects over the Philox
counter-based bit generator, so the sequence for one purpose never depends on
how many draws another purpose consumed, and states serialize exactly.
"""

from __future__ import annotations

import hashlib
import json
from typing import Iterable

import numpy as np

STREAMS = ("noise", "time", "mask", "data", "init", "eval")


def stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"asyncfm:{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def make_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


class RngStreams:
    """A bundle of per-purpose generators derived from one integer seed."""

    def __init__(self, seed: int, names: Iterable[str] = STREAMS):
        self.seed = int(seed)
        self._gens = {name: make_stream(self.seed, name) for name in names}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._gens:
            self._gens[name] = make_stream(self.seed, name)
        return self._gens[name]

    def __contains__(self, name: str) -> bool:
        return name in self._gens

    def names(self) -> list[str]:
        return sorted(self._gens)

    def get_state(self) -> dict[str, dict]:
        return {name: _jsonable(g.bit_generator.state) for name, g in sorted(self._gens.items())}

    def set_state(self, states: dict[str, dict]) -> None:
        for name, state in states.items():
            self[name].bit_generator.state = _from_jsonable(state)

    def spawn(self, name: str) -> np.random.Generator:
        """Independent copy of one stream at its current position."""
        g = make_stream(self.seed, name)
        g.bit_generator.state = self[name].bit_generator.state
        return g

    def state_bytes(self) -> bytes:
        return json.dumps(self.get_state(), sort_keys=True).encode()


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__ndarray__": state.dtype.str, "values": [int(x) for x in state.tolist()]}
    if isinstance(state, np.integer):
        return int(state)
    return state


def _from_jsonable(state):
    if isinstance(state, dict):
        if "__ndarray__" in state:
            return np.array(state["values"], dtype=np.dtype(state["__ndarray__"]))
        return {k: _from_jsonable(v) for k, v in state.items()}
    return state
