"""Named random streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch

STREAMS = ("init-s1", "init-s2", "aug-weak", "aug-strong", "cutmix", "sampler", "mc-oracle")


def derive_seed(master_seed: int, name: str) -> int:
    seq = np.random.SeedSequence([master_seed, zlib.crc32(name.encode())])
    return int(seq.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


class RngStreams:
    """One ``torch.Generator`` per named stream, so components can be reseeded alone."""

    def __init__(self, master_seed: int, names=STREAMS):
        self.master_seed = master_seed
        self._gens = {}
        for name in names:
            g = torch.Generator()
            g.manual_seed(derive_seed(master_seed, name))
            self._gens[name] = g

    def __getitem__(self, name: str) -> torch.Generator:
        return self._gens[name]

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.master_seed, name))

    def state_dict(self) -> dict:
        return {"master_seed": self.master_seed,
                "states": {k: g.get_state() for k, g in self._gens.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.master_seed = state["master_seed"]
        for name, s in state["states"].items():
            if name not in self._gens:
                self._gens[name] = torch.Generator()
            self._gens[name].set_state(s)

    def clone(self) -> "RngStreams":
        other = RngStreams(self.master_seed, names=())
        other.load_state_dict(self.state_dict())
        return other
