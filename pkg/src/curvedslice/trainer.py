"""Adam training of the two field networks with plateau scheduling and constraint correction."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fields
from .deformation import DeformationError, backprop_deform, deform
from .objective import Evaluation, Scene, evaluate, sf_violating_fraction, sr_violating_fraction

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L_SF", "L_SR", "L_PO", "L_HS", "L_HQ", "total", "L_CA", "lr",
               "degenerate", "ca_skipped", "dc3_steps", "sf_violating", "sr_violating")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    lr_min: float = 1e-6
    patience: int = 20
    factor: float = 0.5
    tol: float = 1e-4
    dc3_steps: int = 5
    dc3_step_size: float = 1e-4
    dc3_margin: float = 1e-5
    final_dc3_steps: int = 400
    checkpoint_every: int = 0
    min_epochs: int = 0

    def __post_init__(self):
        if not (self.epochs >= 0 and self.lr > 0 and self.lr_min > 0 and self.patience > 0):
            raise ValueError("epochs, lr, lr_min and patience must be positive")
        if not 0 < self.factor < 1:
            raise ValueError("plateau factor must lie in (0, 1)")
        if self.dc3_steps < 0 or self.final_dc3_steps < 0 or not self.dc3_step_size > 0:
            raise ValueError("bad correction settings")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown trainer keys: {sorted(extra)}")
        return cls(**doc)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """Bias-corrected Adam update; returns new parameters and advances ``state``."""
    grads = np.asarray(grads, float)
    if grads.shape != params.shape:
        raise ValueError("gradient shape mismatch")
    if not np.isfinite(grads).all():
        raise FloatingPointError("non-finite gradient")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    return params - lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class PlateauScheduler:
    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 20
    lr_min: float = 1e-6
    threshold: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, loss: float) -> float:
        """Record one epoch loss; after ``patience`` epochs without relative improvement, cut lr."""
        if not math.isfinite(self.best) or loss < self.best - self.threshold * abs(self.best):
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.bad_epochs = 0
        return self.lr


def lr_schedule(state: PlateauScheduler, epoch_loss: float) -> float:
    return state.step(epoch_loss)


# -- parameters ----------------------------------------------------------------


def get_params(qnet, snet) -> np.ndarray:
    return np.concatenate([qnet.get_flat(), snet.get_flat()])


def set_params(qnet, snet, flat) -> None:
    nq = qnet.n_params()
    qnet.set_flat(flat[:nq])
    snet.set_flat(flat[nq:])


# -- constraint correction -----------------------------------------------------


@dataclass
class CorrectionResult:
    steps: int
    ca_before: float
    ca_after: float
    flagged: bool = False


def dc3_correct(scene: Scene, qnet, snet, steps: int = 5, step_size: float = 1e-4,
                margin: float = 1e-5) -> CorrectionResult:
    """Plain gradient steps on L_CA (with an inward margin) until the constraint holds.

    Steps are not line-searched: the hinge terms are kinked at every nearly
    flat pair, and a monotone search stalls there while plain steps get
    through. If L_CA rises three steps in a row the step size is halved and
    the correction restarts once from the original parameters; a second
    failure is flagged. The best state seen is kept.
    """
    coeffs = {"ca": 1.0}
    start = get_params(qnet, snet)
    ev = evaluate(scene, qnet, snet, coeffs, ca_margin=margin, want_grad=steps > 0)
    ca0 = ev.breakdown.ca
    if ca0 == 0.0 or steps == 0:
        return CorrectionResult(0, ca0, ca0)
    first = ev
    best = (ca0, start)
    eta = step_size
    taken = 0
    for attempt in range(2):
        set_params(qnet, snet, start)
        ev, flat = first, start
        prev, rises, diverged = ca0, 0, False
        for k in range(steps):
            flat = flat - eta * ev.flat_grad()
            set_params(qnet, snet, flat)
            taken += 1
            last = k == steps - 1
            ev = evaluate(scene, qnet, snet, coeffs, ca_margin=margin, want_grad=not last)
            ca = ev.breakdown.ca
            if ca < best[0]:
                best = (ca, flat)
            if ca == 0.0:
                return CorrectionResult(taken, ca0, 0.0)
            rises = rises + 1 if ca > prev else 0
            prev = ca
            if rises >= 3:
                diverged = True
                break
        if not diverged:
            break
        eta *= 0.5
        logger.info("correction diverged; retrying with step %.3g", eta)
    set_params(qnet, snet, best[1])
    if diverged:
        logger.warning("constraint correction flagged: L_CA %.3g -> %.3g", ca0, best[0])
    return CorrectionResult(taken, ca0, best[0], diverged)


def final_correction(scene: Scene, qnet, snet, cfg: "TrainConfig", chunk: int = 50) -> int:
    """Up to ``cfg.final_dc3_steps`` correction steps in chunks, each restarting from the best state.

    A single long correction is cut short by the divergence rule whenever the
    hinge terms bounce for three steps; chunking keeps the rule per chunk
    while letting the overall descent continue. Returns the steps taken.
    """
    taken = 0
    while taken < cfg.final_dc3_steps:
        n = min(chunk, cfg.final_dc3_steps - taken)
        r = dc3_correct(scene, qnet, snet, n, cfg.dc3_step_size, cfg.dc3_margin)
        taken += r.steps
        if r.ca_after == 0.0 or r.steps == 0 or r.ca_after >= r.ca_before:
            break
    return taken


# -- training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    converged: bool = False
    final: object = None
    epochs_run: int = 0
    seconds: float = 0.0
    status: str = "ok"
    restored_epoch: int | None = None  # set when the best feasible iterate was returned instead

    @property
    def success(self) -> bool:
        return self.final is not None and self.final.ca == 0.0 and self.status == "ok"


@dataclass
class TrainerState:
    qnet: fields.FieldNetwork
    snet: fields.FieldNetwork
    adam: AdamState
    sched: PlateauScheduler
    epoch: int = 0
    window: list = field(default_factory=list)
    best_feasible: tuple | None = None  # (total, epoch, params) over epochs ending with L_CA = 0


def new_state(qnet, snet, cfg: TrainConfig) -> TrainerState:
    n = qnet.n_params() + snet.n_params()
    sched = PlateauScheduler(cfg.lr, cfg.factor, cfg.patience, cfg.lr_min, cfg.tol)
    return TrainerState(qnet, snet, AdamState.zeros(n), sched)


def _row(epoch, ev: Evaluation, lr, dc3_steps, scene) -> dict:
    b = ev.breakdown
    return {"epoch": epoch, "L_SF": b.sf, "L_SR": b.sr, "L_PO": b.po, "L_HS": b.hs, "L_HQ": b.hq,
            "total": b.total, "L_CA": b.ca, "lr": lr, "degenerate": b.degenerate,
            "ca_skipped": b.ca_skipped, "dc3_steps": dc3_steps,
            "sf_violating": sf_violating_fraction(scene, ev.state),
            "sr_violating": sr_violating_fraction(scene, ev.state)}


def format_rows(rows, header=True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in LOG_COLUMNS])
    return buf.getvalue()


def optimize(scene: Scene, state: TrainerState, cfg: TrainConfig, log_path=None,
             checkpoint_dir=None, callback=None) -> TrainResult:
    """Full-batch training until max epochs or (plateau and L_CA = 0).

    Per epoch: evaluate at element centres, correct the constraint if it is
    violated, back-propagate the weighted objective and take one Adam step.
    The epoch counter continues from ``state.epoch`` so resumed runs keep
    their numbering.
    """
    qnet, snet = state.qnet, state.snet
    t0 = time.perf_counter()
    res = TrainResult()
    log = None
    epochs_run = 0
    if log_path is not None:
        log_path = Path(log_path)
        fresh = state.epoch == 0 or not log_path.exists()
        log = open(log_path, "w" if fresh else "a")
        if fresh:
            log.write(format_rows([], header=True))
    last_good = get_params(qnet, snet)
    try:
        while state.epoch < cfg.epochs:
            epoch = state.epoch
            try:
                ev = evaluate(scene, qnet, snet)
                corr = CorrectionResult(0, ev.breakdown.ca, ev.breakdown.ca)
                if ev.breakdown.ca > 0 and cfg.dc3_steps:
                    corr = dc3_correct(scene, qnet, snet, cfg.dc3_steps, cfg.dc3_step_size, cfg.dc3_margin)
                    ev = evaluate(scene, qnet, snet)
                grads = ev.flat_grad()
                if not np.isfinite(grads).all():
                    raise FloatingPointError("non-finite gradient")
            except (FloatingPointError, DeformationError) as exc:
                set_params(qnet, snet, last_good)
                res.status = f"numerical failure at epoch {epoch}: {exc}"
                logger.error(res.status)
                break
            row = _row(epoch, ev, state.sched.lr, corr.steps, scene)
            res.history.append(row)
            if log:
                log.write(format_rows([row], header=False))
                log.flush()
            if callback:
                callback(row)
            last_good = get_params(qnet, snet)
            bf = state.best_feasible
            if ev.breakdown.ca == 0.0 and (bf is None or ev.breakdown.total < bf[0]):
                state.best_feasible = (ev.breakdown.total, epoch, last_good.copy())
            set_params(qnet, snet, adam_step(last_good, grads, state.adam, state.sched.lr))
            state.sched.step(ev.breakdown.total)
            state.epoch += 1
            state.window.append(ev.breakdown.total)
            del state.window[:-(cfg.patience + 1)]
            if checkpoint_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"epoch_{state.epoch:05d}", state)
            if (state.epoch >= cfg.min_epochs and len(state.window) > cfg.patience and ev.breakdown.ca == 0.0
                    and state.window[0] - min(state.window[1:]) <= cfg.tol * abs(state.window[0])):
                res.converged = True
                break
        # final state: enforce the hard constraint once more on the parameters actually returned
        epochs_run = len(res.history)
        ev = evaluate(scene, qnet, snet, want_grad=False)
        steps = 0
        if ev.breakdown.ca > 0 and cfg.final_dc3_steps:
            steps = final_correction(scene, qnet, snet, cfg)
            ev = evaluate(scene, qnet, snet, want_grad=False)
        bf = state.best_feasible
        if ev.breakdown.ca > 0 and bf is not None:
            # planar-like fields sit on the constraint boundary; fall back rather than fail
            set_params(qnet, snet, bf[2])
            res.restored_epoch = bf[1]
            logger.warning("final correction left L_CA = %.3g; returning feasible iterate of epoch %d",
                           ev.breakdown.ca, bf[1])
            ev = evaluate(scene, qnet, snet, want_grad=False)
        # closing row describes the returned parameters
        row = _row(state.epoch, ev, state.sched.lr, steps, scene)
        res.history.append(row)
        if log:
            log.write(format_rows([row], header=False))
        res.final = ev.breakdown
        res.final.extras["sf_violating"] = sf_violating_fraction(scene, ev.state)
        res.final.extras["sr_violating"] = sr_violating_fraction(scene, ev.state)
        if ev.breakdown.ca > 0 and res.status == "ok":
            res.status = f"constraint not satisfied at exit (L_CA = {ev.breakdown.ca:.3g})"
    finally:
        if log:
            log.close()
    res.epochs_run = epochs_run
    res.seconds = time.perf_counter() - t0
    return res


# -- pre-training ----------------------------------------------------------------


def pretrain_fit(scene: Scene, qnet, snet, target, epochs: int = 200, lr: float = 1e-3):
    """Fit G to a per-vertex target field by Adam on the centred mean squared error at element centres.

    The mean of G is pinned by the regularizer (the ARAP term is translation
    invariant), so a constant offset in the target is unreachable and removed.
    Returns (final_mse, mse_history).
    """
    cage, system = scene.cage, scene.system
    target = np.asarray(target, float)
    if target.shape != (cage.n_vertices,):
        raise ValueError("target needs one value per cage vertex")
    tc = target[cage.tets].mean(axis=1)
    adam = AdamState.zeros(qnet.n_params() + snet.n_params())
    hist = []
    n = cage.n_elements
    for it in range(epochs + 1):
        fq = fields.forward(qnet, cage.centers)
        fs = fields.forward(snet, cage.centers)
        st = deform(system, fq.value, fs.value)
        r = st.xi[cage.tets, 2].mean(axis=1) - tc
        r = r - r.mean()
        mse = float(np.mean(r * r))
        if not math.isfinite(mse):
            raise TrainingError(f"pre-training diverged at iteration {it} (last mse {hist[-1] if hist else None})")
        hist.append(mse)
        if it == epochs:
            break
        gc = 2.0 * r / n  # centring is a projection, so its adjoint leaves r unchanged
        xi_cot = np.zeros_like(st.xi)
        xi_cot[:, 2] = np.bincount(cage.tets.ravel(), np.repeat(gc / 4.0, 4), minlength=cage.n_vertices)
        q_cot, s_cot = backprop_deform(system, st, xi_cot)
        grads = np.concatenate([fields.flatten(fields.backward(qnet, fq, q_cot)),
                                fields.flatten(fields.backward(snet, fs, s_cot))])
        set_params(qnet, snet, adam_step(get_params(qnet, snet), grads, adam, lr))
    return hist[-1], hist


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, state: TrainerState) -> None:
    """Directory with both networks (binary layout) and optimizer/scheduler state (npz)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    fields.save_network(path / "q.bin", state.qnet)
    fields.save_network(path / "s.bin", state.snet)
    s = state.sched
    extra = {}
    if state.best_feasible is not None:
        total, epoch, params = state.best_feasible
        extra = {"best_total": total, "best_epoch": epoch, "best_params": params}
    np.savez(path / "optimizer.npz", m=state.adam.m, v=state.adam.v, step=state.adam.step,
             epoch=state.epoch, window=np.asarray(state.window, float),
             sched=np.array([s.lr, s.factor, s.patience, s.lr_min, s.threshold, s.best, s.bad_epochs], float),
             **extra)


def load_checkpoint(path) -> TrainerState:
    path = Path(path)
    qnet = fields.load_network(path / "q.bin")
    snet = fields.load_network(path / "s.bin")
    z = np.load(path / "optimizer.npz")
    adam = AdamState(z["m"].copy(), z["v"].copy(), int(z["step"]))
    lr, factor, patience, lr_min, thr, best, bad = z["sched"]
    sched = PlateauScheduler(float(lr), float(factor), int(patience), float(lr_min), float(thr), float(best), int(bad))
    best = None
    if "best_params" in z.files:
        best = (float(z["best_total"]), int(z["best_epoch"]), z["best_params"].copy())
    return TrainerState(qnet, snet, adam, sched, int(z["epoch"]), [float(x) for x in z["window"]], best)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
