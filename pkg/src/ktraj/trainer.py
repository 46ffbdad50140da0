"""Joint training of the trajectory field and the reconstruction network.

Forward chain for one batch::

    control points --ODE--> trajectory --wrap--> NUFFT sampling per coil
        --> adjoint NUFFT --> RSS --> percentile normalization --> recon net --> loss

Gradients of the image loss reach the sample locations through the two
NUFFT point-gradient products; together with the kinematic penalties they
become per-query-time cotangents for a single adjoint ODE solve.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .datakit import make_dataset
from .errors import ConfigError, ShapeError, TrainingDivergence
from .field import FieldParams, MLPField, field_init
from .geometry import (PhysicsLimits, Trajectory, check_limits, extract_control_points,
                       kinematic_arrays, make_initial)
from .nufft import GriddingConfig, NufftPlan
from .objective import (LossReport, l1_loss, psnr, shrinkage_penalty, ssim, wilcoxon_signed_rank,
                        write_metrics_csv)
from .odecore import OdeConfig, integrate, integrate_adjoint
from .recon import ReconParams, normalize_input, recon_build, recon_forward, rss
from .segments import SegmentField, SegmentModel

__all__ = [
    "TrainConfig", "AdamState", "adam_step", "Pipeline", "ModelState", "Gradients", "init_state",
    "trajectory_of", "wrap_band", "constraint_report",
    "forward_pipeline", "backward_pipeline", "train_joint", "evaluate", "TrainResult",
    "EvalReport", "HISTORY_HEADER", "save_state", "load_state", "build_dataset", "run_experiment",
]

HISTORY_HEADER = ["epoch", "split", "total", "l1", "ssim_loss", "pen_v", "pen_a",
                  "psnr", "ssim", "frac_v_ok", "frac_a_ok"]

_SUBCONFIGS = {"ode": OdeConfig, "gridding": GriddingConfig, "limits": PhysicsLimits}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 25
    lr_field: float = 0.01
    lr_recon: float = 0.001
    lr_control: float = 3e-4
    lambda1: float = 0.1
    lambda2: float = 0.1
    mu: float = 1.0
    batch_size: int = 2
    seed: int = 0
    method: str = "learned"          # "learned" or "fixed"
    learn_controls: bool = True
    control_smoothing: float = 0.0   # Gaussian width (in control points) of the control-update filter
    kind: str = "radial"
    shots: int = 8
    samples_per_shot: int = 1000
    n_control: int = 100
    k_extent: float = 0.5
    hidden: int = 256
    use_time: bool = True
    field_gain: float = 2e-4
    grid: int = 64
    coils: int = 4
    levels: int = 3
    base_channels: int = 16
    n_train: int = 20
    n_val: int = 5
    n_test: int = 15
    n_ellipses: int = 6
    data_seed: int = 1234
    ode: OdeConfig = field(default_factory=OdeConfig)
    gridding: GriddingConfig = field(default_factory=GriddingConfig)
    limits: PhysicsLimits = field(default_factory=PhysicsLimits)

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must not exceed epochs")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        for name in ("lr_field", "lr_recon", "lr_control"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr_recon <= 0:
            raise ConfigError("lr_recon must be positive")
        if self.method not in ("learned", "fixed"):
            raise ConfigError(f"method must be 'learned' or 'fixed', got {self.method!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.control_smoothing < 0:
            raise ConfigError("control_smoothing must be non-negative")

    @property
    def physics(self):
        return dataclasses.replace(self.limits, grid=self.grid)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if key in _SUBCONFIGS:
                sub = _SUBCONFIGS[key]
                subnames = {f.name for f in dataclasses.fields(sub)}
                if not isinstance(value, dict):
                    raise ConfigError(f"config key {key!r} must be an object")
                bad = set(value) - subnames
                if bad:
                    raise ConfigError(f"unknown config key {key}.{sorted(bad)[0]!r}")
                try:
                    value = sub(**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid {key} settings: {exc}") from exc
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(data)

    def with_overrides(self, overrides):
        """Apply ``key=value`` strings (dotted keys for nested settings); last one wins."""
        data = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = key.strip().split(".")
            target = data
            for p in parts[:-1]:
                if not isinstance(target.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                target = target[p]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[parts[-1]] = value
        return TrainConfig.from_dict(data)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update of a dict of arrays (or a single array).

    ``state`` is updated in place; the new parameters are returned.
    """
    single = not isinstance(params, dict)
    p = {"_": params} if single else params
    g = {"_": grads} if single else grads
    if set(p) != set(g):
        raise ShapeError("parameter and gradient names differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    out = {}
    for k, w in p.items():
        gk = np.asarray(g[k], dtype=np.float64)
        if gk.shape != np.shape(w):
            raise ShapeError(f"adam: gradient {k!r} has shape {gk.shape}, parameter {np.shape(w)}")
        m = state.m.get(k, np.zeros_like(gk))
        v = state.v.get(k, np.zeros_like(gk))
        m = b1 * m + (1 - b1) * gk
        v = b2 * v + (1 - b2) * gk * gk
        state.m[k], state.v[k] = m, v
        out[k] = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out["_"] if single else out


class Pipeline:
    """Fixed quantities derived from a config: initial trajectory, segment model, offsets."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.limits = cfg.physics
        kw = {"k_extent": cfg.k_extent} if cfg.kind in ("radial", "spiral") else {}
        self.initial = make_initial(cfg.kind, cfg.shots, cfg.samples_per_shot, cfg.grid,
                                    self.limits.dwell, **kw)
        self.controls0 = extract_control_points(self.initial, cfg.n_control)
        self.model = SegmentModel(self.initial.shots, cfg.n_control, cfg.samples_per_shot)
        self.model.fit_offsets(self.initial.points, self.controls0.values)

    def smooth_controls(self, vec):
        """Gaussian low-pass along each shot's control sequence (a symmetric operator)."""
        sigma = self.cfg.control_smoothing
        if sigma == 0:
            return np.array(vec, dtype=np.float64)
        v = np.asarray(vec, dtype=np.float64).reshape(self.initial.shots, self.cfg.n_control, 2)
        return gaussian_filter1d(v, sigma, axis=1, mode="constant").ravel()


@dataclass
class ModelState:
    field: FieldParams | None     # None for the fixed baseline
    controls: np.ndarray
    recon: ReconParams

    def copy(self):
        f = None if self.field is None else self.field.with_flat(self.field.flat())
        return ModelState(f, self.controls.copy(), self.recon.with_flat(self.recon.flat()))


@dataclass
class Gradients:
    field: np.ndarray | None      # flat, FieldParams.flat() order
    controls: np.ndarray | None
    recon: dict


def init_state(cfg, pipe):
    rp = recon_build(cfg.levels, cfg.base_channels, cfg.seed, cfg.grid)
    if cfg.method == "fixed":
        return ModelState(None, pipe.controls0.values.copy(), rp)
    fp = field_init(pipe.initial.shots, cfg.n_control, cfg.hidden, cfg.seed, cfg.use_time)
    return ModelState(fp, pipe.controls0.values.copy(), rp)


def wrap_band(points):
    """Map coordinates into [-0.5, 0.5) using the 1-periodicity of the pixel-grid Fourier model."""
    return points - np.floor(points + 0.5)


def trajectory_of(state, pipe):
    """Raw (unwrapped) trajectory points and the stacked ODE states (None when not integrated)."""
    cfg = pipe.cfg
    if state.field is None and np.array_equal(state.controls, pipe.controls0.values):
        return pipe.initial.points.copy(), None
    fld = None if state.field is None else MLPField(state.field)
    sf = SegmentField(pipe.model, state.controls, fld, cfg.field_gain)
    states = integrate(sf, state.controls, pipe.model.ode_times, cfg.ode)
    return pipe.model.assemble(states, state.controls), states


def constraint_report(points, limits):
    v, a = kinematic_arrays(points, limits.dwell, limits)
    from .geometry import Kinematics
    return check_limits(Kinematics(v, a, v / limits.gamma, a / limits.gamma), limits)


def _penalty_terms(tape, P, limits):
    """Soft-shrinkage penalties on gradient amplitude [T/m] and slew rate [T/m/s] over one tape leaf."""
    ks = limits.k_scale / limits.gamma
    g = (P[:, 1:] - P[:, :-1]) * (ks / limits.dwell)
    s = (P[:, 2:] - 2.0 * P[:, 1:-1] + P[:, :-2]) * (ks / limits.dwell ** 2)
    gn = dc.sqrt(dc.sum_(g * g, axis=-1))
    sn = dc.sqrt(dc.sum_(s * s, axis=-1))
    return shrinkage_penalty(gn, limits.g_max), shrinkage_penalty(sn, limits.s_max)


@dataclass
class _SampleRecord:
    x: np.ndarray       # coil images (C, N, N)
    y: np.ndarray       # samples (C, K)
    z: np.ndarray       # adjoint images (C, N, N)
    r: np.ndarray       # RSS intermediate image
    tape: dc.Tape
    r_leaf: dc.TapeTensor
    loss: dc.TapeTensor
    leaves: dict
    output: np.ndarray


@dataclass
class Intermediates:
    state: ModelState
    points: np.ndarray
    ode_states: np.ndarray | None
    plan: NufftPlan
    samples: list
    pen_tape: dc.Tape
    pen_leaf: dc.TapeTensor
    pen_loss: dc.TapeTensor
    lambdas: tuple
    pipe: Pipeline
    need_trajectory_grad: bool


def _as_batch(samples):
    return samples if isinstance(samples, (list, tuple)) else [samples]


def forward_pipeline(field_params, recon_params, control_state, samples, cfg, pipe=None,
                     penalties_on=True, need_grad=True):
    """Run the forward chain on a batch.  Returns ``(outputs, LossReport, Intermediates)``.

    ``field_params=None`` selects the fixed-trajectory baseline.  With
    ``penalties_on=False`` the penalties are reported but weigh zero in the total.
    """
    pipe = pipe or Pipeline(cfg)
    controls = getattr(control_state, "values", control_state)
    state = ModelState(field_params, np.asarray(controls, dtype=np.float64), recon_params)
    try:
        points, ode_states = trajectory_of(state, pipe)
    except Exception as exc:
        raise type(exc)(f"[trajectory stage] {exc}") from exc
    limits = pipe.limits
    plan = NufftPlan(wrap_band(points).reshape(-1, 2), cfg.grid, cfg.gridding)
    K = plan.n_samples
    batch = _as_batch(samples)
    B = len(batch)
    records, outputs = [], []
    l1s, ssls, imgs = [], [], []
    for smp in batch:
        gt = np.asarray(smp.image, dtype=np.float64)
        if gt.shape != (cfg.grid, cfg.grid):
            raise ShapeError(f"sample image {gt.shape} does not match grid {cfg.grid}")
        x = smp.maps * gt[None]
        y = plan.forward(x)
        z = plan.adjoint(y) / K
        r = rss(z)
        tape = dc.Tape()
        r_leaf = tape.leaf(r, requires_grad=need_grad)
        inp, _ = normalize_input(r_leaf)
        out, leaves = recon_forward(recon_params, inp)
        gt_t = tape.constant(gt)
        l1 = l1_loss(out, gt_t)
        s, _ = ssim(out, gt_t)
        ssim_loss = 1.0 - s
        image = l1 + dc.mul_scalar(ssim_loss, cfg.mu)
        loss = dc.mul_scalar(image, 1.0 / B)
        l1s.append(float(l1.values))
        ssls.append(float(ssim_loss.values))
        imgs.append(float(image.values))
        outputs.append(out.values)
        records.append(_SampleRecord(x, y, z, r, tape, r_leaf, loss, leaves, out.values))

    lam1, lam2 = (cfg.lambda1, cfg.lambda2) if penalties_on else (0.0, 0.0)
    pen_tape = dc.Tape()
    P = pen_tape.leaf(points)
    pv, pa = _penalty_terms(pen_tape, P, limits)
    pen_loss = dc.mul_scalar(pv, lam1) + dc.mul_scalar(pa, lam2)
    image_loss = float(np.mean(imgs))
    report = LossReport(
        image_loss=image_loss, l1=float(np.mean(l1s)), ssim_loss=float(np.mean(ssls)),
        penalty_v=float(pv.values), penalty_a=float(pa.values),
        total=image_loss + lam1 * float(pv.values) + lam2 * float(pa.values))
    inter = Intermediates(state, points, ode_states, plan, records, pen_tape, P, pen_loss,
                          (lam1, lam2), pipe, state.field is not None or cfg.learn_controls)
    return outputs, report, inter


def backward_pipeline(inter, loss_scale=1.0):
    """Gradients of ``loss_scale * total`` for the recon net, field parameters and control points."""
    cfg = inter.pipe.cfg
    plan = inter.plan
    recon_grads = {k: np.zeros_like(w) for k, w in inter.state.recon.weights.items()}
    point_grad = np.zeros((plan.n_samples, 2))
    for rec in inter.samples:
        rec.tape.backward(rec.loss)
        for k, leaf in rec.leaves.items():
            recon_grads[k] += loss_scale * leaf.grad
        if not inter.need_trajectory_grad:
            continue
        gr = loss_scale * rec.r_leaf.grad
        safe = np.where(rec.r > 0, rec.r, 1.0)
        cot_z = np.where(rec.r > 0, gr / safe, 0.0)[None] * rec.z / plan.n_samples
        # z = A^H y / K depends on the locations directly and through y = A x
        point_grad += plan.point_grad(cot_z, rec.y)
        point_grad += plan.point_grad(rec.x, plan.forward(cot_z))
    if not inter.need_trajectory_grad:
        return Gradients(None, None, recon_grads)
    inter.pen_tape.backward(inter.pen_loss)
    dP = point_grad.reshape(inter.points.shape) + loss_scale * inter.pen_leaf.grad
    pipe = inter.pipe
    cot, g_blend = pipe.model.assemble_vjp(dP)
    fp = inter.state.field
    fld = None if fp is None else MLPField(fp)
    sf = SegmentField(pipe.model, inter.state.controls, fld, cfg.field_gain)
    ode_states = inter.ode_states
    if ode_states is None:
        ode_states = integrate(sf, inter.state.controls, pipe.model.ode_times, cfg.ode)
    bundle = integrate_adjoint(sf, ode_states, pipe.model.ode_times, cot, cfg.ode)
    n_theta = 0 if fp is None else fp.size
    g_field = None if fp is None else bundle.a_params[:n_theta]
    g_controls = bundle.a_state + bundle.a_params[n_theta:] + g_blend
    return Gradients(g_field, g_controls, recon_grads)


@dataclass
class TrainResult:
    best: ModelState
    final: ModelState
    history: list
    best_epoch: int
    pipe: Pipeline


def _fmt(v):
    return repr(float(v))


def _eval_split(state, samples, cfg, pipe, penalties_on):
    """Loss and image metrics of ``samples`` without gradient work."""
    rows = []
    for i in range(0, len(samples), cfg.batch_size):
        batch = samples[i:i + cfg.batch_size]
        outs, rep, _ = forward_pipeline(state.field, state.recon, state.controls, batch, cfg, pipe,
                                        penalties_on, need_grad=False)
        for o, smp in zip(outs, batch):
            rows.append((rep, len(batch), psnr(o, smp.image), ssim(o, smp.image)[0]))
    return rows


def _summarize(rows):
    n = sum(r[1] for r in rows)
    w = lambda f: sum(f(r[0]) * r[1] for r in rows) / n
    return {
        "total": w(lambda r: r.total), "l1": w(lambda r: r.l1), "ssim_loss": w(lambda r: r.ssim_loss),
        "pen_v": w(lambda r: r.penalty_v), "pen_a": w(lambda r: r.penalty_a),
        "psnr": float(np.mean([r[2] for r in rows])), "ssim": float(np.mean([r[3] for r in rows])),
    }


def train_joint(dataset, cfg, out_dir=None, log=None):
    """Train on ``dataset['train']`` with validation on ``dataset['val']``.

    The best checkpoint is chosen by validation total among epochs with the
    penalties active (all epochs when there is no constrained phase).
    """
    train, val = list(dataset["train"]), list(dataset["val"])
    if not train:
        raise ValueError("training set is empty")
    if not val:
        raise ValueError("a validation split is required")
    pipe = Pipeline(cfg)
    state = init_state(cfg, pipe)
    fixed = cfg.method == "fixed"
    learn_field = not fixed and cfg.lr_field > 0
    learn_ctrl = not fixed and cfg.learn_controls and cfg.lr_control > 0
    adam_r, adam_f, adam_c = AdamState(), AdamState(), AdamState()
    # controls = initial + S u with S the smoothing filter; Adam acts on u
    u = np.zeros_like(state.controls)
    history = []
    best, best_epoch, best_score = state.copy(), -1, math.inf
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        penalties_on = epoch >= cfg.warmup_epochs
        order = rng.permutation(len(train))
        rows = []
        for bi in range(0, len(order), cfg.batch_size):
            batch = [train[j] for j in order[bi:bi + cfg.batch_size]]
            outs, rep, inter = forward_pipeline(state.field, state.recon, state.controls, batch, cfg,
                                                pipe, penalties_on, need_grad=True)
            if not math.isfinite(rep.total):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch {bi // cfg.batch_size}")
            if fixed:
                inter.need_trajectory_grad = False
            grads = backward_pipeline(inter)
            for o, smp in zip(outs, batch):
                rows.append((rep, len(batch), psnr(o, smp.image), ssim(o, smp.image)[0]))
            state.recon = ReconParams(state.recon.levels, state.recon.base_channels,
                                      adam_step(state.recon.weights, grads.recon, adam_r, cfg.lr_recon))
            if learn_field:
                state.field = state.field.with_flat(adam_step(state.field.flat(), grads.field, adam_f,
                                                              cfg.lr_field))
            if learn_ctrl:
                u = adam_step(u, pipe.smooth_controls(grads.controls), adam_c, cfg.lr_control)
                state.controls = pipe.controls0.values + pipe.smooth_controls(u)
        points, _ = trajectory_of(state, pipe)
        cr = constraint_report(points, pipe.limits)
        tr = _summarize(rows)
        va = _summarize(_eval_split(state, val, cfg, pipe, penalties_on))
        for split, s in (("train", tr), ("val", va)):
            history.append([str(epoch), split] + [_fmt(s[k]) for k in HISTORY_HEADER[2:9]]
                           + [_fmt(cr.frac_velocity_ok), _fmt(cr.frac_accel_ok)])
        if log:
            log(f"epoch {epoch}: train {tr['total']:.4f} val {va['total']:.4f} "
                f"val psnr {va['psnr']:.2f} v_ok {cr.frac_velocity_ok:.3f} a_ok {cr.frac_accel_ok:.3f}")
        eligible = penalties_on or cfg.warmup_epochs >= cfg.epochs
        if eligible and va["total"] < best_score:
            best, best_epoch, best_score = state.copy(), epoch, va["total"]
    if best_epoch < 0:
        best = state.copy()
    result = TrainResult(best, state, history, best_epoch, pipe)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_history(history, os.path.join(out_dir, "history.csv"))
        save_state(best, cfg, out_dir)
    return result


def write_history(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        w.writerows(rows)


def save_state(state, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    meta = {"config": cfg.to_dict(), "method": cfg.method}
    f_arrays = {"controls": state.controls}
    if state.field is not None:
        f_arrays.update(state.field.arrays())
    save_checkpoint(os.path.join(out_dir, "field.ckpt"), f_arrays,
                    dict(meta, use_time=None if state.field is None else state.field.use_time))
    save_checkpoint(os.path.join(out_dir, "recon.ckpt"), state.recon.weights,
                    dict(meta, levels=state.recon.levels, base_channels=state.recon.base_channels))


def load_state(out_dir):
    """Return ``(ModelState, TrainConfig)`` saved by :func:`train_joint`."""
    fa, fmeta = load_checkpoint(os.path.join(out_dir, "field.ckpt"))
    ra, rmeta = load_checkpoint(os.path.join(out_dir, "recon.ckpt"))
    cfg = TrainConfig.from_dict(fmeta["config"])
    fp = None
    if "w1" in fa:
        fp = FieldParams(fa["w1"], fa["b1"], fa["w2"], fa["b2"], bool(fmeta["use_time"]))
    rp = ReconParams(int(rmeta["levels"]), int(rmeta["base_channels"]), ra)
    return ModelState(fp, fa["controls"], rp), cfg


@dataclass
class EvalReport:
    rows: list              # (case, method, psnr_db, ssim)
    summary: dict


def evaluate(checkpoints, test_set, cfg=None):
    """Per-case PSNR/SSIM for each method and paired tests of learned against fixed.

    ``checkpoints`` maps method name to ``(ModelState, TrainConfig)``.  When
    both ``learned`` and ``fixed`` are present the summary holds the mean
    differences (learned - fixed) and the Wilcoxon p-values; an undefined test
    (all differences zero) raises :class:`~ktraj.errors.UndefinedTestError`.
    """
    rows, per = [], {}
    for method, (state, mcfg) in checkpoints.items():
        mcfg = mcfg or cfg
        pipe = Pipeline(mcfg)
        ps, ss = [], []
        for i, smp in enumerate(test_set):
            outs, _, _ = forward_pipeline(state.field, state.recon, state.controls, [smp], mcfg, pipe,
                                          True, need_grad=False)
            p = psnr(outs[0], smp.image)
            s = ssim(outs[0], smp.image)[0]
            rows.append((str(i), method, p, s))
            ps.append(p)
            ss.append(s)
        per[method] = (np.array(ps), np.array(ss))
    summary = {m: {"mean_psnr": float(v[0].mean()), "mean_ssim": float(v[1].mean())} for m, v in per.items()}
    if "learned" in per and "fixed" in per:
        lp, ls = per["learned"]
        fp_, fs = per["fixed"]
        summary["psnr_gain_db"] = float(np.mean(lp - fp_))
        summary["ssim_gain"] = float(np.mean(ls - fs))
        summary["wilcoxon_psnr"] = wilcoxon_signed_rank(lp, fp_)
        summary["wilcoxon_ssim"] = wilcoxon_signed_rank(ls, fs)
    return EvalReport(rows, summary)


def write_eval(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(report.rows, os.path.join(out_dir, "metrics.csv"))
    with open(os.path.join(out_dir, "wilcoxon.json"), "w") as fh:
        json.dump(report.summary, fh, indent=1, sort_keys=True, default=float)


def build_dataset(cfg):
    """Synthetic train/val/test phantoms sharing one coil set, seeded by ``cfg.data_seed``."""
    n = cfg.n_train + cfg.n_val + cfg.n_test
    data = make_dataset(n, cfg.grid, cfg.coils, cfg.data_seed, cfg.n_ellipses)
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return {"train": data[:a], "val": data[a:b], "test": data[b:]}


def run_experiment(cfg, dataset=None, log=None):
    """Train learned and fixed variants with the same seed and evaluate both on the test split."""
    dataset = dataset or build_dataset(cfg)
    learned = train_joint(dataset, dataclasses.replace(cfg, method="learned"), log=log)
    fixed = train_joint(dataset, dataclasses.replace(cfg, method="fixed"), log=log)
    rep = evaluate({"learned": (learned.best, dataclasses.replace(cfg, method="learned")),
                    "fixed": (fixed.best, dataclasses.replace(cfg, method="fixed"))}, dataset["test"])
    return learned, fixed, rep
