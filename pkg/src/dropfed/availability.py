"""Client availability: who participates at each global iteration.

Schedules are materialized up front as explicit active sets, so training,
diagnostics, and exported artifacts all see the identical participation
pattern.  Every generator forces full participation at iteration 0; later
rounds follow the scenario's own law.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError
from .rng import Seed, generator


@dataclass
class AvailabilitySchedule:
    """Active client sets for iterations 0..T-1 over clients 0..N-1."""

    num_clients: int
    active_sets: tuple[tuple[int, ...], ...]
    kind: str = "custom"
    _last_seen: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        cleaned = []
        for t, ids in enumerate(self.active_sets):
            ids = tuple(sorted(int(i) for i in ids))
            if len(set(ids)) != len(ids):
                raise ConfigError(f"iteration {t}: duplicate client ids {ids}")
            if ids and (ids[0] < 0 or ids[-1] >= self.num_clients):
                raise ConfigError(f"iteration {t}: client id out of range in {ids}")
            cleaned.append(ids)
        self.active_sets = tuple(cleaned)
        # last_seen[t, i]: most recent iteration before t where i was active,
        # or -1 when there is none.
        last = np.full((len(cleaned) + 1, self.num_clients), -1, dtype=np.int64)
        for t, ids in enumerate(cleaned):
            last[t + 1] = last[t]
            for i in ids:
                last[t + 1, i] = t
        self._last_seen = last

    @property
    def iterations(self) -> int:
        return len(self.active_sets)

    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.active_sets], dtype=np.int64)

    def staleness(self, t: int, client: int) -> int:
        """Iterations since the client's previous appearance; 0 at t = 0."""
        if not 0 <= t < self.iterations:
            raise ConfigError(f"iteration {t} outside [0, {self.iterations})")
        if not 0 <= client < self.num_clients:
            raise ConfigError(f"client {client} outside [0, {self.num_clients})")
        if t == 0:
            return 0
        prev = int(self._last_seen[t, client])
        if prev < 0:
            raise IntegrityError(f"client {client} never active before iteration {t}")
        return t - prev

    def max_staleness(self) -> int:
        """Largest staleness over all (t, i) with i active at t."""
        worst = 0
        for t, ids in enumerate(self.active_sets):
            for i in ids:
                worst = max(worst, self.staleness(t, i))
        return worst

    def to_text(self) -> str:
        """One line per iteration, comma-separated active client ids."""
        return "\n".join(",".join(str(i) for i in ids) for ids in self.active_sets) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def schedule_from_text(text: str, num_clients: int, kind: str = "custom") -> AvailabilitySchedule:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    sets = []
    for line in lines:
        line = line.strip()
        sets.append(tuple(int(v) for v in line.split(",")) if line else ())
    return AvailabilitySchedule(num_clients, tuple(sets), kind=kind)


def load_schedule(path: str | Path, num_clients: int) -> AvailabilitySchedule:
    return schedule_from_text(Path(path).read_text(), num_clients)


def periodic_schedule(periods: list[int], iterations: int) -> AvailabilitySchedule:
    """Client i participates exactly when t is a multiple of periods[i]."""
    if any(p < 1 for p in periods):
        raise ConfigError(f"periods must be >= 1, got {periods}")
    sets = tuple(
        tuple(i for i, p in enumerate(periods) if t % p == 0) for t in range(iterations)
    )
    return AvailabilitySchedule(len(periods), sets, kind="round_robin")


def round_robin_schedule(
    num_clients: int, iterations: int, tau_max: int, seed: Seed
) -> AvailabilitySchedule:
    """Each client wakes on its own fixed period drawn from {1, ..., tau_max}.

    Periods come from max(1, u) with u uniform on {0, ..., tau_max}, so the
    gap between a client's consecutive appearances never exceeds tau_max.
    """
    if tau_max < 1:
        raise ConfigError(f"tau_max must be >= 1, got {tau_max}")
    draws = generator(seed).integers(0, tau_max + 1, size=num_clients)
    periods = [max(1, int(u)) for u in draws]
    return periodic_schedule(periods, iterations)


def static_prob_schedule(
    num_clients: int,
    iterations: int,
    prob: float,
    seed: Seed,
    force_full_start: bool = True,
) -> AvailabilitySchedule:
    """Independent coin flips: each client joins each round with probability prob.

    Rounds may be empty.  force_full_start keeps the conventional full round
    at t = 0; switch it off to study cold starts.
    """
    if not 0.0 < prob <= 1.0:
        raise ConfigError(f"prob must be in (0, 1], got {prob}")
    rng = generator(seed)
    sets = []
    for t in range(iterations):
        if t == 0 and force_full_start:
            sets.append(tuple(range(num_clients)))
            continue
        draws = rng.random(num_clients)
        sets.append(tuple(np.nonzero(draws <= prob)[0].tolist()))
    return AvailabilitySchedule(num_clients, tuple(sets), kind="static")


def weighted_sample_schedule(
    num_clients: int, iterations: int, ratio: float, seed: Seed
) -> AvailabilitySchedule:
    """Exactly round(ratio * N) clients per round, picked by random weights.

    Each round draws fresh weights uniform on [1, 10] and selects without
    replacement: one sequential draw proportional to the remaining weights,
    renormalizing after each pick.
    """
    count = int(round(ratio * num_clients))
    if not 1 <= count <= num_clients:
        raise ConfigError(
            f"ratio {ratio} selects {count} of {num_clients} clients; need 1..{num_clients}"
        )
    rng = generator(seed)
    sets: list[tuple[int, ...]] = [tuple(range(num_clients))]
    for _ in range(1, iterations):
        weights = rng.uniform(1.0, 10.0, size=num_clients)
        remaining = list(range(num_clients))
        picked = []
        for _ in range(count):
            w = weights[remaining]
            edges = np.cumsum(w)
            j = int(np.searchsorted(edges, rng.random() * edges[-1], side="right"))
            j = min(j, len(remaining) - 1)
            picked.append(remaining.pop(j))
        sets.append(tuple(picked))
    return AvailabilitySchedule(num_clients, tuple(sets[:iterations]), kind="weighted")
