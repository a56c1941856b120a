"""Named parameter tensors with group membership, plus the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError
from .tensorcore import Tensor

GROUPS = ("base", "code_projections", "lora", "speaker_codes")


class ParameterStore:
    """Map of parameter name to tensor; every name belongs to exactly one group.

    The trainable flag of a parameter is its tensor's ``requires_grad``.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._group: dict[str, str] = {}

    def add(self, name: str, values, group: str, trainable: bool = True) -> Tensor:
        if group not in GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        if name in self._tensors:
            raise ContractError(f"parameter {name!r} already registered")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=trainable)
        self._tensors[name] = t
        self._group[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, group: str | None = None) -> list[str]:
        if group is not None and group not in GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        return [n for n in self._tensors if group is None or self._group[n] == group]

    def group_of(self, name: str) -> str:
        return self._group[name]

    def is_trainable(self, name: str) -> bool:
        return self._tensors[name].requires_grad

    def set_trainable(self, groups: Iterable[str], flag: bool = True) -> None:
        for g in groups:
            for n in self.names(g):
                self._tensors[n].requires_grad_(flag)

    def freeze_all(self) -> None:
        self.set_trainable(GROUPS, False)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def count(self, group: str) -> int:
        """Number of scalar parameters registered in ``group``."""
        return int(np.sum([self._tensors[n].data.size for n in self.names(group)], dtype=np.int64))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def copy(self, private_groups: Iterable[str] = GROUPS) -> "ParameterStore":
        """New store with fresh tensor objects.

        Values of ``private_groups`` are copied; the others share their
        (read-only by convention) arrays with this store.
        """
        private = set(private_groups)
        out = ParameterStore()
        for name, t in self._tensors.items():
            g = self._group[name]
            values = t.data.copy() if g in private else t.data
            nt = Tensor.__new__(Tensor)
            Tensor.__init__(nt, values, requires_grad=t.requires_grad)
            out._tensors[name] = nt
            out._group[name] = g
        return out

    def snapshot(self, groups: Iterable[str], trainable_only: bool = False) -> dict[str, np.ndarray]:
        gs = set(groups)
        return {n: t.data.copy() for n, t in self._tensors.items()
                if self._group[n] in gs and (t.requires_grad or not trainable_only)}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for name, v in values.items():
            t = self._tensors[name]
            if t.data.shape != np.shape(v):
                raise ContractError(f"shape mismatch loading {name!r}")
            t.data = np.array(v, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            name: {
                "shape": list(t.shape),
                "values": t.data.reshape(-1).tolist(),
                "group": self._group[name],
                "trainable": bool(t.requires_grad),
            }
            for name, t in self._tensors.items()
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParameterStore":
        store = cls()
        for name, rec in d.items():
            values = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
            store.add(name, values, rec["group"], bool(rec["trainable"]))
        return store


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # per-tensor update counts, for bias correction of lazily updated tensors
    t: dict[str, int] = field(default_factory=dict)
    step: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "t": dict(self.t),
            "m": {k: a.reshape(-1).tolist() for k, a in self.m.items()},
            "v": {k: a.reshape(-1).tolist() for k, a in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping, params: ParameterStore) -> "AdamState":
        def load(src):
            return {k: np.asarray(a, dtype=np.float64).reshape(params[k].shape) for k, a in src.items()}

        return cls(m=load(d["m"]), v=load(d["v"]), t={k: int(x) for k, x in d["t"].items()}, step=int(d["step"]))


def adam_step(
    params: ParameterStore,
    state: AdamState,
    lr: float | Mapping[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Iterable[str] | None = None,
) -> None:
    """One bias-corrected Adam update on the trainable tensors in ``names``.

    ``names`` defaults to every trainable tensor.  Tensors outside it keep
    their values, moments and step counts, which is how per-batch
    speaker-code selection is realised.  ``lr`` may map group name to
    learning rate.
    """
    state.step += 1
    if names is None:
        names = params.trainable_names()
    for name in names:
        p = params[name]
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"trainable tensor {name!r} has no gradient")
        rate = lr[params.group_of(name)] if isinstance(lr, Mapping) else lr
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        t = state.t.get(name, 0) + 1
        state.t[name] = t
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - rate * (m / c1) / (np.sqrt(v / c2) + eps)
