"""
Safety semantics: target function, safety backup, and ground-truth
reachability.

The target function scores a guidance vector:

    ℓ = −tanh(η · (‖ε_c − ε_u‖₂ − β))

During a rollout ℓ is taken on the guidance under the steering actually
applied at that step, so leaving the caption inside a trigger ball counts as
entering the failure set. The final state, where no steering follows, is
scored by its safety margin: ℓ under the best steering on a small escape
grid, negative only when the latent is locked into a memorization basin.
The backward reachable tube (BRT) collects states from which entering the
failure set is unavoidable before the horizon ends, whatever the steering
does.

Two solvers provide reference values:
  - compute_brt_oracle: exhaustive backward induction on a latent grid with
    a finite action grid and multilinear interpolation (DDIM only)
  - tabular_fixed_point: the discounted safety backup iterated to its fixed
    point on a finite MDP, used to check what the learned critic converges to
"""

import itertools
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from rads.codec import CodecParams, steer
from rads.dynamics import CaptionEmbedding, SystemState, ToyDenoiser, episode_rngs, zero_policy
from rads.errors import ConvergenceError, DimensionError, OracleError
from rads.models.schemas import GridSpec, NoiseMode, TargetFnParams

logger = logging.getLogger(__name__)

BRT_FORMAT_VERSION = 1


# ── Target function ─────────────────────────────────────────────────

def ell_from_norm(norm, params: TargetFnParams):
    return -np.tanh(params.eta * (np.asarray(norm, dtype=np.float64) - params.beta))


def target_ell(s: SystemState, e_steered: CaptionEmbedding, env: ToyDenoiser, params: TargetFnParams) -> float:
    x = np.asarray(s.x, dtype=np.float64)
    if x.shape != (env.cfg.n_x,) or np.shape(e_steered.e) != (env.cfg.n_e,):
        raise DimensionError(f"state {x.shape} / embedding {np.shape(e_steered.e)} do not match the environment")
    if not 0 <= s.step <= env.T:
        raise DimensionError(f"state step {s.step} outside [0, {env.T}]")
    norm = env.guidance_norms(x[None, :], np.asarray(e_steered.e)[None, :])[0]
    return float(ell_from_norm(norm, params))


def escape_embeddings(e_base: CaptionEmbedding, codec: CodecParams, params: TargetFnParams) -> np.ndarray:
    """Embeddings reachable from `e_base` on the escape action grid, shape (A, n_e)."""
    return np.array([steer(e_base, u, codec).e for u in action_grid(codec.d, params.escape_points_per_axis)])


def margin_batch(
    env: ToyDenoiser, xs: np.ndarray, escapes: np.ndarray, params: TargetFnParams
) -> np.ndarray:
    """Safety margin of each latent: ℓ under the best available steering.

    A state is in the failure set only when every escape embedding still
    produces a guidance norm above β, i.e. the latent is locked into a basin.
    """
    n = len(xs)
    norms = np.stack([env.guidance_norms(xs, np.broadcast_to(e, (n, env.cfg.n_e))) for e in escapes])
    return ell_from_norm(norms.min(axis=0), params)


def state_margin(
    s: SystemState, e_base: CaptionEmbedding, env: ToyDenoiser, codec: CodecParams, params: TargetFnParams
) -> float:
    x = np.asarray(s.x, dtype=np.float64)
    if x.shape != (env.cfg.n_x,):
        raise DimensionError(f"state {x.shape} does not match n_x = {env.cfg.n_x}")
    return float(margin_batch(env, x[None, :], escape_embeddings(e_base, codec, params), params)[0])


def make_ell_fn(env: ToyDenoiser, codec: CodecParams, params: TargetFnParams):
    """ℓ for rollouts.

    `ell(state, e_base, e_steered)` scores the guidance produced at `state` by
    the embedding actually applied, so a step that stays inside a trigger ball
    is unsafe however the latent ends up. Without `e_steered` (the final
    state, where no control follows) it returns the state margin for `e_base`.
    Escape embeddings are cached per caption; rollout threads share the cache.
    """
    cache: dict[bytes, np.ndarray] = {}
    lock = threading.Lock()

    def escapes_for(e_base: CaptionEmbedding) -> np.ndarray:
        key = np.asarray(e_base.e, dtype=np.float64).tobytes()
        with lock:
            if key not in cache:
                cache[key] = escape_embeddings(e_base, codec, params)
            return cache[key]

    def ell(state: SystemState, e_base: CaptionEmbedding, e_steered: CaptionEmbedding | None = None) -> float:
        if e_steered is not None:
            return target_ell(state, e_steered, env, params)
        return float(margin_batch(env, np.asarray(state.x)[None, :], escapes_for(e_base), params)[0])
    return ell


def safety_backup(ell_t, q_next, gamma: float, terminal, ell_T):
    """Discounted safety target: ℓ(s_T) at the end, else (1−γ)ℓ + γ·min(ℓ, Q′).

    Accepts scalars or equal-length arrays.
    """
    ell_t = np.asarray(ell_t, dtype=np.float64)
    bootstrap = (1.0 - gamma) * ell_t + gamma * np.minimum(ell_t, q_next)
    out = np.where(terminal, ell_T, bootstrap)
    return float(out) if out.ndim == 0 else out


# ── Calibration ─────────────────────────────────────────────────────

@dataclass
class Calibration:
    beta: float
    accuracy: float
    n_triggered: int
    n_plain: int


def best_threshold(norms: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Accuracy-maximizing threshold for `norm > threshold ⇒ triggered`.

    Candidates are the midpoints between consecutive distinct sorted norms
    plus one threshold below and one above every sample.
    """
    norms = np.asarray(norms, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    values = np.unique(norms)
    candidates = np.concatenate([[values[0] - 1.0], (values[:-1] + values[1:]) / 2.0, [values[-1] + 1.0]])
    acc = np.array([np.mean((norms > c) == labels) for c in candidates])
    best = int(np.argmax(acc))
    return float(candidates[best]), float(acc[best])


def calibrate_beta(
    env: ToyDenoiser,
    codec: CodecParams,
    captions: list[CaptionEmbedding],
    seeds: list[int],
) -> Calibration:
    """Threshold sweep over guidance norms of unmitigated rollouts."""
    act = zero_policy(env.cfg.d)
    norms, labels = [], []
    for seed in seeds:
        for i, caption in enumerate(captions):
            env_rng, policy_rng = episode_rngs(seed, i)
            state = env.initial_state(env_rng)
            triggered = env.is_triggered(caption)
            for t in range(env.T):
                e = steer(caption, act(env.observe(state, caption), policy_rng), codec)
                norms.append(env.guidance_norms(state.x[None, :], e.e[None, :])[0])
                labels.append(triggered)
                nxt = env.step_batch(state.x[None, :], e.e[None, :], t, env.draw_noise(env_rng).omega[None, :])[0]
                state = SystemState(nxt, t + 1)
    labels = np.array(labels)
    beta, accuracy = best_threshold(np.array(norms), labels)
    logger.info("Calibrated beta=%.4f (accuracy %.2f%% over %d states)", beta, 100 * accuracy, len(labels))
    return Calibration(beta=beta, accuracy=accuracy, n_triggered=int(labels.sum()), n_plain=int((~labels).sum()))


# ── Grid oracle ─────────────────────────────────────────────────────

@dataclass
class BrtGrid:
    axes: list[np.ndarray]
    actions: np.ndarray          # (A, d)
    values: np.ndarray           # (T+1, n_1, ..., n_{n_x})
    beta: float
    eta: float
    caption_id: str = ""
    interp_error: float = 0.0
    mask_error: float = 0.0

    @property
    def T(self) -> int:
        return self.values.shape[0] - 1

    @property
    def mask(self) -> np.ndarray:
        """True where the state is in the BRT (V ≤ 0)."""
        return self.values <= 0.0

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def value_at(self, xs: np.ndarray, t: int) -> np.ndarray:
        return _interpolate(self.axes, self.values[t], xs)


def _interpolate(axes: list[np.ndarray], layer: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Multilinear interpolation; queries outside the grid clamp to the boundary."""
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    interp = RegularGridInterpolator(axes, layer, method="linear")
    return interp(np.clip(xs, lo, hi))


def action_grid(d: int, per_axis: int) -> np.ndarray:
    ticks = np.linspace(-1.0, 1.0, per_axis) if per_axis > 1 else np.zeros(1)
    return np.array(list(itertools.product(ticks, repeat=d)))


def default_box(env: ToyDenoiser, codec: CodecParams, e_base: CaptionEmbedding) -> tuple[np.ndarray, np.ndarray]:
    """Bounding box of everything a trajectory for `e_base` can be pulled towards."""
    pts = [env.base - 3.0 * env.cfg.init_std, env.base + 3.0 * env.cfg.init_std]
    pts.extend(env.targets)
    for u in action_grid(codec.d, 2):
        pts.append(env.latent_map @ steer(e_base, u, codec).e)
    pts = np.array(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.1 * (hi - lo) + 0.5
    return lo - pad, hi + pad


def compute_brt_oracle(
    env: ToyDenoiser,
    codec: CodecParams,
    e_base: CaptionEmbedding,
    grid: GridSpec,
    params: TargetFnParams,
    actions: np.ndarray | None = None,
) -> BrtGrid:
    """Undiscounted best-case reachability values on a latent grid.

    V(x, T) = ℓ(x)
    V(x, t) = max_u min(ℓ(x, u), V(f(x, u), t+1))

    ℓ(x) is the state margin for `e_base` and ℓ(x, u) the target function on
    the guidance under steering u, matching what rollouts record. `actions`
    (default: the `GridSpec` action grid) are the controls the max ranges
    over.
    """
    if env.cfg.noise_mode != NoiseMode.DDIM:
        raise OracleError(
            "the reachability oracle needs deterministic dynamics; "
            "DDPM noise makes next states random, so set env.noise_mode = \"DDIM\""
        )
    n_x = env.cfg.n_x
    if n_x > 3:
        raise OracleError(f"grid oracle supports n_x ≤ 3, got n_x = {n_x}")

    if grid.lo is not None:
        lo, hi = np.asarray(grid.lo, dtype=np.float64), np.asarray(grid.hi, dtype=np.float64)
    else:
        lo, hi = default_box(env, codec, e_base)
    axes = [np.linspace(lo[i], hi[i], grid.points_per_axis) for i in range(n_x)]
    shape = tuple(len(a) for a in axes)
    if actions is None:
        actions = action_grid(codec.d, grid.action_points_per_axis)

    mesh = np.meshgrid(*axes, indexing="ij")
    xs = np.stack([m.ravel() for m in mesh], axis=-1)
    n_pts = len(xs)

    escapes = escape_embeddings(e_base, codec, params)
    steered = np.array([steer(e_base, u, codec).e for u in actions])
    margin = margin_batch(env, xs, escapes, params)
    step_ell = [ell_from_norm(env.guidance_norms(xs, np.broadcast_to(e, (n_pts, env.cfg.n_e))), params) for e in steered]

    values = np.empty((env.T + 1,) + shape)
    values[env.T] = margin.reshape(shape)
    for t in reversed(range(env.T)):
        best = np.full(n_pts, -np.inf)
        for e, ell_u in zip(steered, step_ell):
            nxt = env.step_batch(xs, np.broadcast_to(e, (n_pts, env.cfg.n_e)), t)
            best = np.maximum(best, np.minimum(ell_u, _interpolate(axes, values[t + 1], nxt)))
        values[t] = best.reshape(shape)

    interp_error, mask_error = _interpolation_error(env, axes, values[env.T], escapes, params)
    if mask_error > grid.max_mask_error:
        logger.warning(
            "Oracle grid may be too coarse: interpolation flips the failure sign on %.2f%% of cells "
            "(max abs error %.4f, points_per_axis=%d)", 100 * mask_error, interp_error, grid.points_per_axis,
        )

    result = BrtGrid(
        axes=axes, actions=np.asarray(actions), values=values,
        beta=params.beta, eta=params.eta, caption_id=e_base.caption_id,
        interp_error=interp_error, mask_error=mask_error,
    )
    logger.info(
        "Oracle for caption '%s': %d grid points x %d actions, BRT fraction at t=0 %.3f",
        e_base.caption_id, n_pts, len(actions), float(result.mask[0].mean()),
    )
    return result


def _interpolation_error(env, axes, terminal_layer, escapes, params) -> tuple[float, float]:
    """Max gap between exact ℓ and its interpolant at cell centres, and the
    fraction of centres where the two disagree in sign."""
    mids = [(a[:-1] + a[1:]) / 2.0 for a in axes]
    mesh = np.meshgrid(*mids, indexing="ij")
    xs = np.stack([m.ravel() for m in mesh], axis=-1)
    exact = margin_batch(env, xs, escapes, params)
    approx = _interpolate(axes, terminal_layer, xs)
    return float(np.max(np.abs(exact - approx))), float(np.mean((exact <= 0.0) != (approx <= 0.0)))


def mask_hamming(coarse: BrtGrid, fine: BrtGrid) -> tuple[int, float]:
    """Disagreements between BRT masks, compared at the coarse grid nodes."""
    pts = coarse.points()
    count = 0
    for t in range(coarse.T + 1):
        fine_mask = fine.value_at(pts, t) <= 0.0
        count += int(np.count_nonzero(fine_mask != coarse.mask[t].ravel()))
    return count, count / coarse.values.size


def refinement_study(env, codec, e_base, grid: GridSpec, params: TargetFnParams, levels: int = 3) -> list[dict]:
    """Hamming distance between successive 2x refinements of the state grid."""
    grids = []
    n = grid.points_per_axis
    for _ in range(levels):
        grids.append(compute_brt_oracle(env, codec, e_base, grid.model_copy(update={"points_per_axis": n}), params))
        n = 2 * n - 1
    rows = []
    for coarse, fine in zip(grids[:-1], grids[1:]):
        count, frac = mask_hamming(coarse, fine)
        rows.append({
            "coarse_points": len(coarse.axes[0]),
            "fine_points": len(fine.axes[0]),
            "hamming": count,
            "hamming_fraction": frac,
        })
    return rows


def save_brt(grid: BrtGrid, out_dir: str | Path, stem: str = "brt") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    values_path = out_dir / f"{stem}_values.npy"
    meta_path = out_dir / f"{stem}_meta.json"
    np.save(values_path, grid.values)
    meta = {
        "format_version": BRT_FORMAT_VERSION,
        "T": grid.T,
        "axes": [a.tolist() for a in grid.axes],
        "actions": grid.actions.tolist(),
        "beta": grid.beta,
        "eta": grid.eta,
        "caption_id": grid.caption_id,
        "interp_error": grid.interp_error,
        "mask_error": grid.mask_error,
        "brt_fraction": float(grid.mask.mean()),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return values_path, meta_path


def load_brt(out_dir: str | Path, stem: str = "brt") -> BrtGrid:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / f"{stem}_meta.json").read_text())
    if meta.get("format_version") != BRT_FORMAT_VERSION:
        raise OracleError(f"BRT file version {meta.get('format_version')} is not supported")
    return BrtGrid(
        axes=[np.array(a) for a in meta["axes"]],
        actions=np.array(meta["actions"]),
        values=np.load(out_dir / f"{stem}_values.npy"),
        beta=meta["beta"],
        eta=meta["eta"],
        caption_id=meta["caption_id"],
        interp_error=meta["interp_error"],
        mask_error=meta["mask_error"],
    )


# ── Tabular solvers ─────────────────────────────────────────────────

@dataclass
class TabularMDP:
    """Deterministic finite system: next_state[s, a] is the successor index."""

    next_state: np.ndarray       # (S, A) int
    ell: np.ndarray              # (S,)

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]


def bellman_backup(q: np.ndarray, mdp: TabularMDP, gamma: float, policy: np.ndarray | None = None) -> np.ndarray:
    """One discounted safety backup. `policy[s]` fixes u′ at s; None takes the best u′."""
    if policy is None:
        v = q.max(axis=1)
    else:
        v = q[np.arange(mdp.n_states), policy]
    ell = mdp.ell[:, None]
    return (1.0 - gamma) * ell + gamma * np.minimum(ell, v[mdp.next_state])


def tabular_fixed_point(
    mdp: TabularMDP,
    gamma: float,
    policy: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Iterate the safety backup until the sup-norm change drops below `tol`."""
    if not 0.0 < gamma <= 1.0:
        raise DimensionError(f"gamma must lie in (0, 1], got {gamma}")
    q = np.repeat(np.asarray(mdp.ell, dtype=np.float64)[:, None], mdp.n_actions, axis=1)
    for it in range(1, max_iter + 1):
        nxt = bellman_backup(q, mdp, gamma, policy)
        delta = float(np.max(np.abs(nxt - q)))
        q = nxt
        if delta < tol:
            logger.debug("Tabular fixed point converged in %d iterations", it)
            return q
    raise ConvergenceError(f"safety backup did not converge in {max_iter} iterations (last change {delta:.3e})")


def tabular_reach_values(mdp: TabularMDP, T: int) -> np.ndarray:
    """Undiscounted finite-horizon best-case values, shape (T+1, S)."""
    values = np.empty((T + 1, mdp.n_states))
    values[T] = mdp.ell
    for t in reversed(range(T)):
        values[t] = np.minimum(mdp.ell, values[t + 1][mdp.next_state].max(axis=1))
    return values
