"""Seeded lossy links for both directions of the control loop.

All randomness comes from SplitMix64, a fixed 64-bit generator implemented
with plain integer arithmetic so bit sequences are identical on every
platform.  A uniform draw is ``(x >> 11) * 2**-53``; a transmission is lost
when that draw is below the loss probability.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
_INV53 = 2.0 ** -53
_INV32 = 2.0 ** -32


class SplitMix64:
    """SplitMix64 (Steele, Lea and Flood).  One call to :meth:`next` is one draw."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next() >> 11) * _INV53

    def uniform_array(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)])

    def uniform_pair(self) -> tuple[float, float]:
        """Two 32-bit uniforms from a single 64-bit draw."""
        z = self.next()
        return (z >> 32) * _INV32, (z & 0xFFFFFFFF) * _INV32


def derive_seed(master: int, *parts) -> int:
    """Stable 64-bit seed from a master seed and any labels (ints or strings)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


class LossProcess:
    """Base class; ``sample(rng)`` returns 1 for delivered, 0 for lost."""

    kind = "base"

    def sample(self, rng: SplitMix64) -> int:
        raise NotImplementedError

    def reset(self) -> None:
        pass

    def to_dict(self) -> dict:
        raise NotImplementedError


def _check_prob(name: str, p: float, upper_open: bool = True) -> float:
    p = float(p)
    ok = 0.0 <= p < 1.0 if upper_open else 0.0 <= p <= 1.0
    if not ok:
        raise ValueError(f"{name}={p} outside the allowed range")
    return p


class Bernoulli(LossProcess):
    kind = "bernoulli"

    def __init__(self, rho: float):
        self.rho = _check_prob("rho", rho)

    def sample(self, rng: SplitMix64) -> int:
        return 0 if rng.uniform() < self.rho else 1

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rho": self.rho}


class Scripted(LossProcess):
    """Replays a fixed bit sequence (cycled).  Still consumes one draw per call."""

    kind = "scripted"

    def __init__(self, bits: Sequence[int]):
        bits = [int(b) for b in bits]
        if not bits or any(b not in (0, 1) for b in bits):
            raise ValueError("scripted sequence must be a nonempty list of bits")
        self.bits = bits
        self.pos = 0
        if assumption1_monitor(bits, bits)["good_events"] == 0:
            warnings.warn("scripted sequence never has two consecutive deliveries", stacklevel=2)

    def sample(self, rng: SplitMix64) -> int:
        rng.next()
        b = self.bits[self.pos % len(self.bits)]
        self.pos += 1
        return b

    def reset(self) -> None:
        self.pos = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bits": list(self.bits)}


class GilbertElliott(LossProcess):
    """Two-state Markov channel; the state transition and the loss share one draw."""

    kind = "gilbert_elliott"

    def __init__(self, p_gb: float, p_bg: float, rho_good: float, rho_bad: float):
        self.p_gb = _check_prob("p_gb", p_gb, upper_open=False)
        self.p_bg = _check_prob("p_bg", p_bg, upper_open=False)
        self.rho_good = _check_prob("rho_good", rho_good)
        self.rho_bad = _check_prob("rho_bad", rho_bad, upper_open=False)
        self.bad = False

    def sample(self, rng: SplitMix64) -> int:
        u_state, u_loss = rng.uniform_pair()
        if self.bad:
            self.bad = not (u_state < self.p_bg)
        else:
            self.bad = u_state < self.p_gb
        rho = self.rho_bad if self.bad else self.rho_good
        return 0 if u_loss < rho else 1

    def reset(self) -> None:
        self.bad = False

    def to_dict(self) -> dict:
        return {"kind": self.kind, "p_gb": self.p_gb, "p_bg": self.p_bg,
                "rho_good": self.rho_good, "rho_bad": self.rho_bad}


def loss_from_dict(d: dict) -> LossProcess:
    kind = d.get("kind", "bernoulli")
    if kind == "bernoulli":
        return Bernoulli(d.get("rho", 0.0))
    if kind == "scripted":
        return Scripted(d["bits"])
    if kind == "gilbert_elliott":
        return GilbertElliott(d["p_gb"], d["p_bg"], d["rho_good"], d["rho_bad"])
    raise ValueError(f"unknown loss process {kind!r}")


@dataclass
class Link:
    """One direction of the channel with its own random stream and log."""

    loss: LossProcess
    seed: int
    tag: str = ""
    log: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.rng = SplitMix64(self.seed)
        self._last_k: int | None = None

    def transmit(self, k: int) -> int:
        if self._last_k is not None and k != self._last_k + 1:
            raise ValueError(f"link {self.tag!r}: expected step {self._last_k + 1}, got {k}")
        self._last_k = k
        bit = self.loss.sample(self.rng)
        self.log.append((k, bit))
        return bit

    @property
    def bits(self) -> list[int]:
        return [b for _, b in self.log]


def make_links(loss: LossProcess | dict, master_seed: int, *run_key) -> tuple[Link, Link]:
    """Forward (controller to plant, theta) and reverse (plant to controller, gamma) links."""
    import copy

    proto = loss_from_dict(loss) if isinstance(loss, dict) else loss
    fwd = Link(copy.deepcopy(proto), derive_seed(master_seed, *run_key, "theta"), "theta")
    rev = Link(copy.deepcopy(proto), derive_seed(master_seed, *run_key, "gamma"), "gamma")
    fwd.loss.reset()
    rev.loss.reset()
    return fwd, rev


def assumption1_monitor(gammas: Sequence[int], thetas: Sequence[int]) -> dict:
    """Diagnostics for the 'two consecutive deliveries' condition.

    A good event at ``t`` is ``gamma[t-1] = theta[t] = 1``.  Reports the
    number of good events and the longest stretch of steps without one.
    ``gamma[-1]`` is taken as 1, the forced initial exchange.
    """
    if len(gammas) != len(thetas):
        raise ValueError("gamma and theta logs differ in length")
    good = 0
    run = longest = 0
    for t in range(len(thetas)):
        ok = (t == 0 or gammas[t - 1] == 1) and thetas[t] == 1
        if ok:
            good += 1
            run = 0
        else:
            run += 1
            longest = max(longest, run)
    return {"good_events": good, "longest_bad_run": longest, "length": len(thetas)}
