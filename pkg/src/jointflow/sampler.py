"""ODE samplers: independent base flow, diversity-coupled joint sets, and the
residual-augmented marginal flow, plus the regrouping procedure that turns
pooled joint finals into synthetic independent sets.

Every sampler records the per-step velocity components it actually applied,
so downstream weight integration replays the exact realized path instead of
recomputing (and drifting from) it.  One joint set advances serially because
its samples are coupled; independent sets are batched through a shared
driver whose arithmetic is identical for every batch width.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diversity as dv
from . import nnet, scorereg
from .rectflow import FlowModel, TimeGrid, score_from_velocity

__all__ = [
    "JointSampleSet",
    "sample_iid",
    "sample_joint",
    "sample_marginal",
    "regroup_marginal",
    "run_trials",
    "replay_positions",
    "trial_rng",
    "write_sets",
    "read_sets",
    "write_finals",
    "read_finals",
    "sets_to_csv",
]

_SETFILE_MAGIC = b"JFSETS1\n"

_NO_DIVERSITY = dv.DiversityConfig(objective="none", lam=0.0)


@dataclass
class JointSampleSet:
    """n coupled trajectories with their per-step velocity records.

    ``positions`` has shape (n_steps + 1, n, d); the velocity records have
    shape (n_steps, n, d).  ``u`` is the diversity velocity after
    regularization and scaling; ``r`` is the residual output when the
    marginal flow produced the set, else None.  ``log_weights`` stays None
    until a weight integrator fills it.
    """

    grid: TimeGrid
    positions: np.ndarray
    v: np.ndarray
    u: np.ndarray
    r: np.ndarray | None = None
    seed: int | None = None
    log_weights: np.ndarray | None = None
    weight_method: str | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    @property
    def finals(self) -> np.ndarray:
        return self.positions[-1]


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent per-trial generator from a root seed and trial index."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(trial,)))


def replay_positions(sset: JointSampleSet) -> np.ndarray:
    """Re-advance the stored trajectory from its recorded velocities.

    Sums the components in the same order the driver did (v + u, then + r),
    so the result is bitwise-identical to the stored positions.
    """
    knots = sset.grid.knots
    out = np.empty_like(sset.positions)
    out[0] = sset.positions[0]
    x = sset.positions[0]
    for k in range(sset.grid.n_steps):
        vel = sset.v[k] + sset.u[k]
        if sset.r is not None:
            vel = vel + sset.r[k]
        x = x + (knots[k + 1] - knots[k]) * vel
        out[k + 1] = x
    return out


def _advance_batch(
    model: FlowModel,
    x0: np.ndarray,
    grid: TimeGrid,
    dcfg: dv.DiversityConfig,
    rmode: str,
    use_residual: bool,
    keep_records: bool = True,
):
    """Shared Euler driver over a stack of independent sets, shape (S, n, d)."""
    s_count, n, d = x0.shape
    knots = grid.knots
    steps = grid.n_steps
    coupled = dcfg.active and n >= 2
    if coupled and use_residual:
        raise ValueError("diversity coupling and the residual flow are separate samplers")
    if use_residual and model.residual is None:
        raise ValueError("marginal sampling requires a trained residual")
    pos = np.empty((steps + 1, s_count, n, d)) if keep_records else None
    v_rec = np.empty((steps, s_count, n, d)) if keep_records else None
    u_rec = np.empty((steps, s_count, n, d)) if keep_records else None
    r_rec = np.empty((steps, s_count, n, d)) if keep_records and use_residual else None
    x = x0.copy()
    if keep_records:
        pos[0] = x
    zero_u = np.zeros_like(x)
    for k in range(steps):
        t = knots[k]
        dt = knots[k + 1] - t
        flat = x.reshape(s_count * n, d)
        v = nnet.forward(model.base, flat, t).reshape(s_count, n, d)
        if coupled:
            finals = dv.predicted_finals(x, v, t)
            g = dv._grads_batch(finals, dcfg)
            if dcfg.grad_mode == "full_vjp":
                vj = nnet.vjp_input(model.base, flat, t, g.reshape(s_count * n, d))
                g = g + (1.0 - t) * vj.reshape(s_count, n, d)
            if rmode != "off":
                s = score_from_velocity(v, x, t)
                g = scorereg.regularize(g, s, t, rmode)
            u = dv._scale_batch(g, v, t, dcfg.lam)
        else:
            u = zero_u
        vel = v + u
        if use_residual:
            r = nnet.forward(model.residual, flat, t).reshape(s_count, n, d)
            vel = vel + r
        x = x + dt * vel
        if keep_records:
            v_rec[k] = v
            u_rec[k] = u
            if use_residual:
                r_rec[k] = r
            pos[k + 1] = x
    if keep_records:
        return pos, v_rec, u_rec, r_rec
    return x


def _single_set(model, grid, n, rng, dcfg, rmode, use_residual, seed=None) -> JointSampleSet:
    x0 = rng.standard_normal((n, model.dim))
    pos, v_rec, u_rec, r_rec = _advance_batch(
        model, x0[None], grid, dcfg, rmode, use_residual
    )
    return JointSampleSet(
        grid=grid,
        positions=pos[:, 0],
        v=v_rec[:, 0],
        u=u_rec[:, 0],
        r=None if r_rec is None else r_rec[:, 0],
        seed=seed,
    )


def sample_iid(model: FlowModel, n: int, grid: TimeGrid, rng: np.random.Generator) -> JointSampleSet:
    """n independent Euler trajectories under the base velocity alone."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _single_set(model, grid, n, rng, _NO_DIVERSITY, "off", use_residual=False)


def sample_joint(
    model: FlowModel,
    n: int,
    grid: TimeGrid,
    dcfg: dv.DiversityConfig,
    rmode: str = "off",
    rng: np.random.Generator | None = None,
) -> JointSampleSet:
    """n coupled trajectories: base velocity plus the regularized, scaled
    diversity velocity computed from the whole set at each step.

    With the objective disabled (or lambda = 0) this reduces bitwise to
    :func:`sample_iid` under a shared generator state.
    """
    if dcfg.active and n < 2:
        raise ValueError("active diversity needs at least two coupled samples")
    if rng is None:
        rng = np.random.default_rng(0)
    try:
        return _single_set(model, grid, n, rng, dcfg, rmode, use_residual=False)
    except dv.DiversityObjectiveError as err:
        raise dv.DiversityObjectiveError(f"{err} (objective {dcfg.objective!r})") from err


def sample_marginal(model: FlowModel, n: int, grid: TimeGrid, rng: np.random.Generator) -> JointSampleSet:
    """n independent trajectories under base + residual velocity."""
    if model.residual is None:
        raise ValueError("marginal sampling requires a trained residual")
    return _single_set(model, grid, n, rng, _NO_DIVERSITY, "off", use_residual=True)


def regroup_marginal(
    pool_finals: np.ndarray, group_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Randomly partition pooled finals into disjoint groups of ``group_size``.

    The remainder that does not fill a group is dropped, keeping all groups
    exchangeable.  Returns shape (n_groups, group_size, d).
    """
    pool_finals = np.asarray(pool_finals, dtype=float)
    if pool_finals.ndim != 2:
        raise ValueError("pool must be a (P, d) matrix of finals")
    p = pool_finals.shape[0]
    if p < group_size:
        raise ValueError(f"pool of {p} cannot fill a group of {group_size}")
    order = rng.permutation(p)
    n_groups = p // group_size
    return pool_finals[order[: n_groups * group_size]].reshape(n_groups, group_size, -1)


def _run_chunk(args):
    model, grid, n, dcfg, rmode, use_residual, seed, trials_chunk, record = args
    x0 = np.stack(
        [trial_rng(seed, trial).standard_normal((n, model.dim)) for trial in trials_chunk]
    )
    if record == "finals":
        finals = _advance_batch(model, x0, grid, dcfg, rmode, use_residual, keep_records=False)
        return finals
    pos, v_rec, u_rec, r_rec = _advance_batch(model, x0, grid, dcfg, rmode, use_residual)
    return [
        JointSampleSet(
            grid=grid,
            positions=pos[:, i],
            v=v_rec[:, i],
            u=u_rec[:, i],
            r=None if r_rec is None else r_rec[:, i],
            seed=int(trial),
        )
        for i, trial in enumerate(trials_chunk)
    ]


def run_trials(
    model: FlowModel,
    grid: TimeGrid,
    n: int,
    trials: int,
    dcfg: dv.DiversityConfig = _NO_DIVERSITY,
    rmode: str = "off",
    seed: int = 0,
    record: str = "full",
    use_residual: bool = False,
    workers: int = 1,
    chunk: int = 128,
    trial_offset: int = 0,
):
    """Advance many independent sets, chunked for vectorized batching.

    Each trial draws its noise from :func:`trial_rng`, so any trial is
    reproducible in isolation.  Chunk boundaries depend only on ``chunk``,
    never on ``workers``, which keeps outputs identical for any worker
    count.  ``record="full"`` returns a list of :class:`JointSampleSet`;
    ``record="finals"`` returns just the (trials, n, d) final positions.
    """
    if record not in ("full", "finals"):
        raise ValueError("record must be 'full' or 'finals'")
    trial_ids = list(range(trial_offset, trial_offset + trials))
    chunks = [trial_ids[i : i + chunk] for i in range(0, len(trial_ids), chunk)]
    jobs = [(model, grid, n, dcfg, rmode, use_residual, seed, c, record) for c in chunks]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, jobs))
    else:
        results = [_run_chunk(job) for job in jobs]
    if record == "finals":
        return np.concatenate(results, axis=0)
    out: list[JointSampleSet] = []
    for chunk_sets in results:
        out.extend(chunk_sets)
    return out


# ---------------------------------------------------------------------------
# Serialization: a deterministic binary container plus a CSV dump for plotting.
# ---------------------------------------------------------------------------


def _write_container(path, magic: bytes, header: dict, arrays: dict) -> None:
    header = dict(header)
    header["arrays"] = [
        {"name": name, "shape": list(arr.shape), "dtype": "<f8"} for name, arr in arrays.items()
    ]
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_container(path, magic: bytes):
    with open(path, "rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise ValueError(f"{path}: bad magic, not a sample-set file")
        header = json.loads(fh.readline().decode("ascii"))
        arrays = {}
        for meta in header["arrays"]:
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated array {meta['name']}")
            arrays[meta["name"]] = np.frombuffer(buf, dtype="<f8").reshape(meta["shape"]).copy()
    return header, arrays


def write_sets(path, sets: list[JointSampleSet]) -> None:
    """Store full-record sets in one deterministic binary file."""
    if not sets:
        raise ValueError("no sets to write")
    grid = sets[0].grid
    header = {
        "kind": "sets",
        "steps": grid.n_steps,
        "n": sets[0].n,
        "d": sets[0].dim,
        "seeds": [s.seed if s.seed is not None else -1 for s in sets],
        "has_r": sets[0].r is not None,
    }
    arrays = {
        "positions": np.stack([s.positions for s in sets]),
        "v": np.stack([s.v for s in sets]),
        "u": np.stack([s.u for s in sets]),
    }
    if header["has_r"]:
        arrays["r"] = np.stack([s.r for s in sets])
    _write_container(path, _SETFILE_MAGIC, header, arrays)


def read_sets(path) -> list[JointSampleSet]:
    header, arrays = _read_container(path, _SETFILE_MAGIC)
    if header.get("kind") != "sets":
        raise ValueError(f"{path}: expected a full-record set file")
    grid = TimeGrid(n_steps=int(header["steps"]))
    out = []
    for i, seed in enumerate(header["seeds"]):
        out.append(
            JointSampleSet(
                grid=grid,
                positions=arrays["positions"][i],
                v=arrays["v"][i],
                u=arrays["u"][i],
                r=arrays["r"][i] if header["has_r"] else None,
                seed=None if seed == -1 else int(seed),
            )
        )
    return out


def write_finals(path, finals: np.ndarray, seed: int) -> None:
    """Store finals-only trial output (trials, n, d)."""
    finals = np.asarray(finals, dtype=float)
    if finals.ndim != 3:
        raise ValueError("finals must have shape (trials, n, d)")
    _write_container(path, _SETFILE_MAGIC, {"kind": "finals", "seed": seed}, {"finals": finals})


def read_finals(path) -> np.ndarray:
    header, arrays = _read_container(path, _SETFILE_MAGIC)
    if header.get("kind") != "finals":
        raise ValueError(f"{path}: expected a finals file")
    return arrays["finals"]


def sets_to_csv(path, sets: list[JointSampleSet]) -> None:
    """Plain-text columnar dump: trial, sample, step, position, v, u, r.

    Velocity columns are empty on the final row of each trajectory (there is
    no step beyond t = 1).  Floats use repr so values round-trip exactly.
    """
    if not sets:
        raise ValueError("no sets to write")
    d = sets[0].dim
    has_r = sets[0].r is not None
    cols = ["trial", "sample", "step"]
    cols += [f"pos_{a}" for a in range(d)]
    cols += [f"v_{a}" for a in range(d)]
    cols += [f"u_{a}" for a in range(d)]
    if has_r:
        cols += [f"r_{a}" for a in range(d)]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(cols) + "\n")
        for trial, sset in enumerate(sets):
            tid = sset.seed if sset.seed is not None else trial
            steps = sset.grid.n_steps
            for i in range(sset.n):
                for k in range(steps + 1):
                    row = [str(tid), str(i), str(k)]
                    row += [repr(float(v)) for v in sset.positions[k, i]]
                    if k < steps:
                        row += [repr(float(v)) for v in sset.v[k, i]]
                        row += [repr(float(v)) for v in sset.u[k, i]]
                        if has_r:
                            row += [repr(float(v)) for v in sset.r[k, i]]
                    else:
                        pad = 3 * d if has_r else 2 * d
                        row += [""] * pad
                    fh.write(",".join(row) + "\n")
