"""Server-side aggregation rules and their persistent state.

Every algorithm shares one update law: collect per-client vectors, average
them over the participating set (or all clients, for memorized updates),
and apply w <- w - eta_t * v.  What differs is how each client's vector is
assembled:

* fedavg / fedprox: the raw averaged local gradient.
* mifa: the server remembers each client's last upload and averages the
  memory of all N clients every round.
* mimic: the upload is shifted by a stored correction equal to the gap
  between the last round's global update and the client's own upload, which
  re-centers the average of whoever shows up toward the full-population
  update.
* scaffold: clients correct every local step with control variates before
  uploading (two vectors per client per round cross the wire).

Round functions never mutate their input state; they return a fresh state.
That makes deterministic replays (full-batch expectations, variance probes)
a matter of calling the same function twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, IntegrityError
from .local_trainer import LocalConfig, local_train, sample_batch
from .objectives import Objective, ParamVector

ALGORITHMS = ("fedavg", "fedprox", "mifa", "mimic", "scaffold")

RngFactory = Callable[[int], np.random.Generator]


@dataclass
class ServerState:
    """Global model plus whatever memory the chosen algorithm carries."""

    algorithm: str
    w: np.ndarray
    num_clients: int
    round_index: int = 0
    # mimic: per-client corrections and the round each was written.
    corrections: dict[int, np.ndarray] = field(default_factory=dict)
    correction_round: dict[int, int] = field(default_factory=dict)
    # "server" or "client": where corrections physically live.  Purely a
    # bookkeeping tag; the arithmetic is identical either way.
    correction_site: str = "server"
    # mifa: last upload per client and the round it was made.
    memory: dict[int, np.ndarray] = field(default_factory=dict)
    memory_round: dict[int, int] = field(default_factory=dict)
    # scaffold: server and per-client control variates.
    server_variate: np.ndarray | None = None
    client_variates: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class RoundResult:
    """Applied update v_t, the per-client vectors behind it, and the new state."""

    v: np.ndarray
    uploads: dict[int, np.ndarray]
    state: ServerState


def init_state(
    algorithm: str,
    w0: ParamVector,
    num_clients: int,
    correction_site: str = "server",
) -> ServerState:
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    if num_clients < 1:
        raise ConfigError(f"num_clients must be >= 1, got {num_clients}")
    if correction_site not in ("server", "client"):
        raise ConfigError(f"correction_site must be server or client, got {correction_site}")
    w0 = np.array(w0, dtype=np.float64)
    state = ServerState(algorithm, w0, num_clients, correction_site=correction_site)
    if algorithm == "scaffold":
        state.server_variate = np.zeros_like(w0)
    return state


def memory_footprint(state: ServerState) -> dict[str, int]:
    """Vector counts held server-side vs client-side, for cost reporting."""
    if state.algorithm == "mimic":
        held = len(state.corrections)
        return (
            {"server": held, "client": 0}
            if state.correction_site == "server"
            else {"server": 0, "client": held}
        )
    if state.algorithm == "mifa":
        return {"server": len(state.memory), "client": 0}
    if state.algorithm == "scaffold":
        return {"server": 1, "client": len(state.client_variates)}
    return {"server": 0, "client": 0}


def _mean(vectors: list[np.ndarray]) -> np.ndarray:
    # Fixed-order sum then divide: the one accumulation order every mode and
    # storage-site variant shares, so alternate paths agree bit-for-bit.
    acc = vectors[0].copy()
    for vec in vectors[1:]:
        acc += vec
    return acc / len(vectors)


def fedavg_round(state: ServerState, uploads: dict[int, np.ndarray], eta: float) -> RoundResult:
    ids = sorted(uploads)
    v = _mean([uploads[i] for i in ids])
    new = replace(state, w=state.w - eta * v, round_index=state.round_index + 1)
    return RoundResult(v, dict(uploads), new)


def mifa_round(state: ServerState, uploads: dict[int, np.ndarray], eta: float) -> RoundResult:
    memory = dict(state.memory)
    memory_round = dict(state.memory_round)
    for i in sorted(uploads):
        memory[i] = uploads[i]
        memory_round[i] = state.round_index
    missing = [i for i in range(state.num_clients) if i not in memory]
    if missing:
        raise IntegrityError(f"memorized updates missing for clients {missing}")
    v = _mean([memory[i] for i in range(state.num_clients)])
    new = replace(
        state,
        w=state.w - eta * v,
        round_index=state.round_index + 1,
        memory=memory,
        memory_round=memory_round,
    )
    return RoundResult(v, dict(uploads), new)


def mimic_round(state: ServerState, uploads: dict[int, np.ndarray], eta: float) -> RoundResult:
    """Correction-variable aggregation.

    Each participating upload is shifted by that client's stored correction
    (zero until first written), the shifted vectors are averaged into v, and
    afterwards every participant's correction becomes v minus its raw upload.
    The participants' corrections therefore keep the same mean they had
    before the round, and a client absent since round t' contributes exactly
    the correction written at t'.
    """
    ids = sorted(uploads)
    zero = np.zeros_like(state.w)
    v = _mean([uploads[i] + state.corrections.get(i, zero) for i in ids])
    corrections = dict(state.corrections)
    correction_round = dict(state.correction_round)
    for i in ids:
        corrections[i] = v - uploads[i]
        correction_round[i] = state.round_index
    new = replace(
        state,
        w=state.w - eta * v,
        round_index=state.round_index + 1,
        corrections=corrections,
        correction_round=correction_round,
    )
    return RoundResult(v, dict(uploads), new)


def scaffold_round(
    state: ServerState,
    objectives: list[Objective],
    active: list[int],
    cfg: LocalConfig,
    eta: float,
    rng_for: RngFactory,
    *,
    literal_anchor: bool = False,
    full_batch: bool = False,
) -> RoundResult:
    """One round of control-variate training, local loop included.

    Default form keeps persistent variates: client i steps with
    g_i(w_k) - c_i + c, uploads the average corrected gradient, and resets
    c_i to the average of its raw gradients; the server variate absorbs
    (1/N) sum of the participants' variate changes.  With literal_anchor the
    variates are rebuilt inside the round from gradients at the broadcast
    point: client i steps with g_i(w_k) - g_i(w_t) + mean_j g_j(w_t).
    Either way each client ships two vectors per round.
    """
    ids = sorted(active)
    # One batch stream per client per round, shared between the anchor draw
    # (literal form only) and the K local steps, in that order.
    rngs = {i: rng_for(i) for i in ids}
    anchors: dict[int, np.ndarray] = {}
    if literal_anchor:
        for i in ids:
            obj = objectives[i]
            idx = (
                np.arange(obj.dataset.n)
                if full_batch
                else sample_batch(rngs[i], obj.dataset.n, cfg.batch_size)
            )
            anchors[i] = obj.batch_grad(state.w, idx)
        anchor_mean = _mean([anchors[i] for i in ids])

    uploads: dict[int, np.ndarray] = {}
    new_variates = dict(state.client_variates)
    variate_shift = np.zeros_like(state.w)
    zero = np.zeros_like(state.w)
    for i in ids:
        obj = objectives[i]
        rng = rngs[i]
        if literal_anchor:
            shift = anchor_mean - anchors[i]
        else:
            shift = (state.server_variate if state.server_variate is not None else zero) - new_variates.get(i, zero)
        w_loc = state.w.copy()
        corrected_sum = np.zeros_like(state.w)
        raw_sum = np.zeros_like(state.w)
        for _ in range(cfg.steps):
            idx = (
                np.arange(obj.dataset.n)
                if full_batch
                else sample_batch(rng, obj.dataset.n, cfg.batch_size)
            )
            g = obj.batch_grad(w_loc, idx)
            corrected = g + shift
            w_loc = w_loc - cfg.lr * corrected
            corrected_sum += corrected
            raw_sum += g
        uploads[i] = corrected_sum / cfg.steps
        if not literal_anchor:
            fresh = raw_sum / cfg.steps
            variate_shift += fresh - new_variates.get(i, zero)
            new_variates[i] = fresh

    v = _mean([uploads[i] for i in ids])
    new = replace(state, w=state.w - eta * v, round_index=state.round_index + 1)
    if not literal_anchor:
        new.client_variates = new_variates
        new.server_variate = (
            state.server_variate if state.server_variate is not None else zero
        ) + variate_shift / state.num_clients
    return RoundResult(v, uploads, new)


def play_round(
    state: ServerState,
    objectives: list[Objective],
    active: list[int],
    cfg: LocalConfig,
    eta: float,
    rng_for: RngFactory,
    *,
    scaffold_literal: bool = False,
    full_batch: bool = False,
) -> RoundResult:
    """Run one full round: local training on each active client, then aggregate.

    An empty active set leaves the model untouched (v = 0) and just advances
    the round counter.  full_batch swaps every batch draw for the whole
    client dataset, which is how deterministic per-round expectations are
    replayed; it consumes nothing from the rng streams.
    """
    if len(objectives) != state.num_clients:
        raise ConfigError(
            f"{len(objectives)} objectives for {state.num_clients} clients"
        )
    if not active:
        new = replace(state, w=state.w.copy(), round_index=state.round_index + 1)
        return RoundResult(np.zeros_like(state.w), {}, new)

    if state.algorithm == "scaffold":
        return scaffold_round(
            state,
            objectives,
            active,
            cfg,
            eta,
            rng_for,
            literal_anchor=scaffold_literal,
            full_batch=full_batch,
        )

    uploads = {}
    for i in sorted(active):
        run_cfg = cfg
        if full_batch:
            run_cfg = replace(cfg, batch_size=objectives[i].dataset.n)
        uploads[i], _ = local_train(objectives[i], state.w, run_cfg, rng_for(i))
    if state.algorithm in ("fedavg", "fedprox"):
        return fedavg_round(state, uploads, eta)
    if state.algorithm == "mifa":
        return mifa_round(state, uploads, eta)
    if state.algorithm == "mimic":
        return mimic_round(state, uploads, eta)
    raise ConfigError(f"unknown algorithm {state.algorithm!r}")
