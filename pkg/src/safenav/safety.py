"""TTC-based constraint signal and the learned first-order safety layer.

The constraint for the nearest filtered vehicle is ``mu * t0 - eta * TTC``
(safe when <= 0). A small MLP ``f(x)`` estimates how the action moves that
value over one step, ``c' ~ c + f(x) . a``, and unsafe actions are projected
onto the linearised half-space in closed form.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .env import EGO_DIM, SOCIAL_DIM, STATE_DIM, TASK_SLICE, filter_social, scale_state, task_of

log = logging.getLogger(__name__)

SINGLE_TASK_DIM = EGO_DIM + SOCIAL_DIM   # ego + nearest vehicle
MULTI_TASK_DIM = SINGLE_TASK_DIM + 3


@dataclass(frozen=True)
class ConstraintConfig:
    mu: float = 1.0
    eta: float = 0.85
    t0: float = 0.1
    ttc_cap: float = 100.0
    activation_ttc: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if self.t0 <= 0.0 or self.mu <= 0.0:
            raise ValueError("mu and t0 must be positive")
        if self.ttc_cap <= self.activation_ttc:
            raise ValueError("ttc_cap must exceed activation_ttc")

    @classmethod
    def conservative(cls, **kw) -> ConstraintConfig:
        return cls(mu=3.0, eta=0.9, **kw)

    @property
    def boundary_ttc(self) -> float:
        return self.mu * self.t0 / self.eta

    def value(self, ttc: float) -> float:
        return self.mu * self.t0 - self.eta * ttc


def ttc_fix(R, V, cap: float = 100.0) -> float:
    """Time to collision from the velocity projected on the relative position.

    ``R`` is the other vehicle's position relative to the ego, ``V`` its
    relative velocity. Receding or perpendicular motion gives ``cap``.
    """
    rx, ry = float(R[0]), float(R[1])
    norm = math.hypot(rx, ry)
    if norm == 0.0:
        return 0.0
    closing = (rx * float(V[0]) + ry * float(V[1])) / norm   # |V| cos<R, V>
    if closing >= 0.0:
        return cap
    return min(-norm / closing, cap)


def state_ttc(s, cap: float = 100.0) -> float:
    """TTC against the vehicle in the first social slot of a state vector."""
    v1, x1, y1, ca, sa = s[EGO_DIM:EGO_DIM + SOCIAL_DIM]
    if ca == 0.0 and sa == 0.0:
        return cap
    return ttc_fix((x1, y1), (v1 * ca - s[0], v1 * sa), cap)


def state_constraint(s, cfg: ConstraintConfig) -> float:
    return cfg.value(state_ttc(s, cfg.ttc_cap))


def constraint_value(world, cfg: ConstraintConfig) -> float:
    """``c - C`` against the nearest filtered social vehicle of ``world``."""
    ego = world.ego
    social = filter_social(world)
    if not social:
        return cfg.value(cfg.ttc_cap)
    other = social[0]
    evx, evy = ego.velocity
    ovx, ovy = other.velocity
    ttc = ttc_fix((other.x - ego.x, other.y - ego.y), (ovx - evx, ovy - evy), cfg.ttc_cap)
    return cfg.value(ttc)


def clip_state(s, multitask: bool = False) -> np.ndarray:
    """Safety-model input: ego + nearest vehicle (9), plus task one-hot (12)."""
    s = np.asarray(s, dtype=np.float64)
    x = s[..., :SINGLE_TASK_DIM]
    if multitask:
        x = np.concatenate([x, s[..., TASK_SLICE][..., :3]], axis=-1)
    return x


# ---------------------------------------------------------------------------
# dataset


@dataclass
class SafetyDataset:
    x: np.ndarray        # (n, 9|12) clipped states
    a: np.ndarray        # (n, 2) raw actions
    c: np.ndarray        # (n,) c - C at s
    c_next: np.ndarray   # (n,) c - C at s'

    def __len__(self) -> int:
        return len(self.c)

    def __post_init__(self):
        n = len(self.c)
        if not (len(self.x) == len(self.a) == len(self.c_next) == n):
            raise ValueError("dataset columns have different lengths")


DATASET_MAGIC = b"SNSD"
DATASET_VERSION = 1


def save_dataset(ds: SafetyDataset, path, fmt: str = "binary") -> None:
    if fmt == "csv":
        xd, ad = ds.x.shape[1], ds.a.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(xd)] + [f"a{i}" for i in range(ad)] + ["c", "c_next"])
            for i in range(len(ds)):
                w.writerow([repr(float(v)) for v in ds.x[i]] + [repr(float(v)) for v in ds.a[i]]
                           + [repr(float(ds.c[i])), repr(float(ds.c_next[i]))])
        return
    if fmt != "binary":
        raise ValueError(f"unknown dataset format {fmt!r}")
    xd, ad = ds.x.shape[1], ds.a.shape[1]
    rec = np.concatenate([ds.x, ds.a, ds.c[:, None], ds.c_next[:, None]], axis=1)
    header = DATASET_MAGIC + struct.pack("<IIIQ", DATASET_VERSION, xd, ad, len(ds))
    body = b"".join(struct.pack("<I", rec.shape[1] * 8) + row.astype("<f8").tobytes() for row in rec)
    Path(path).write_bytes(header + body)


def load_dataset(path) -> SafetyDataset:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, data = rows[0], np.array(rows[1:], dtype=np.float64).reshape(-1, len(rows[0]))
        xd = sum(1 for h in head if h.startswith("x"))
        ad = sum(1 for h in head if h.startswith("a"))
        return SafetyDataset(data[:, :xd], data[:, xd:xd + ad], data[:, -2], data[:, -1])
    buf = path.read_bytes()
    if len(buf) < 24 or buf[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a safety dataset")
    version, xd, ad, n = struct.unpack("<IIIQ", buf[4:24])
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
    width = xd + ad + 2
    rec_size = 4 + 8 * width
    if len(buf) != 24 + n * rec_size:
        raise ValueError(f"{path}: corrupt dataset length")
    rows = np.empty((n, width))
    pos = 24
    for i in range(n):
        (nbytes,) = struct.unpack("<I", buf[pos:pos + 4])
        if nbytes != 8 * width:
            raise ValueError(f"{path}: bad record length at {i}")
        rows[i] = np.frombuffer(buf[pos + 4:pos + 4 + nbytes], dtype="<f8")
        pos += rec_size
    return SafetyDataset(rows[:, :xd], rows[:, xd:xd + ad], rows[:, -2], rows[:, -1])


def collect_dataset(env, n: int, seed: int = 0, cfg: ConstraintConfig = ConstraintConfig(),
                    tasks=("left",), multitask: bool = False, active_only: bool = True,
                    same_target: bool = True, max_steps: int | None = None) -> SafetyDataset:
    """Roll a uniform random policy and keep ``n`` consecutive-step samples.

    With ``active_only`` only pairs whose TTC is below the activation
    threshold at both steps are kept (a jump to the TTC cap when a vehicle
    starts receding is not a first-order effect of the action);
    ``same_target`` drops pairs whose nearest vehicle changed between the two
    steps.  The environment's traffic stream is reseeded from ``seed``.
    Raises RuntimeError after ``max_steps`` simulator steps (default
    ``1000 * n + 100_000``) so a traffic setting that never produces
    qualifying samples cannot hang.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    budget = 1000 * n + 100_000 if max_steps is None else max_steps
    rng = np.random.default_rng(seed)
    env.rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    xs, acts, cs, cns = [], [], [], []
    s = env.reset(tasks[int(rng.integers(len(tasks)))])
    ids = [v.id for v in env.social]
    steps = 0
    while len(cs) < n:
        if steps >= budget:
            raise RuntimeError(f"only {len(cs)} of {n} samples after {steps} steps")
        steps += 1
        a = rng.random(2)
        s2, _, done, info = env.step(a)
        ttc = state_ttc(s, cfg.ttc_cap)
        ttc2 = state_ttc(s2, cfg.ttc_cap)
        keep = bool(ids) and (not active_only or max(ttc, ttc2) < cfg.activation_ttc)
        if keep and same_target:
            keep = bool(info.social_ids) and info.social_ids[0] == ids[0]
        if keep:
            xs.append(clip_state(s, multitask))
            acts.append(a)
            cs.append(cfg.value(ttc))
            cns.append(cfg.value(ttc2))
        if done:
            s = env.reset(tasks[int(rng.integers(len(tasks)))])
            ids = [v.id for v in env.social]
        else:
            s, ids = s2, info.social_ids
    return SafetyDataset(np.array(xs), np.array(acts), np.array(cs), np.array(cns))


# ---------------------------------------------------------------------------
# model


def _scale_clipped(x: np.ndarray) -> np.ndarray:
    pad = np.zeros(x.shape[:-1] + (STATE_DIM,))
    pad[..., :SINGLE_TASK_DIM] = x[..., :SINGLE_TASK_DIM]
    out = x.copy()
    out[..., :SINGLE_TASK_DIM] = scale_state(pad)[..., :SINGLE_TASK_DIM]
    return out


class SafetyModel:
    """``f(x; w)``: clipped state -> estimated d(c)/d(action), 3 x 256 ReLU."""

    def __init__(self, input_dim: int = SINGLE_TASK_DIM, hidden=(256, 256, 256), seed: int = 0,
                 cfg: ConstraintConfig = ConstraintConfig(), action_dim: int = 2):
        rng = np.random.default_rng(seed)
        self.input_dim = input_dim
        self.cfg = cfg
        self.params = nn.ParamSet()
        spec = nn.MlpSpec(input_dim, tuple(hidden) + (action_dim,),
                          ("relu",) * len(hidden) + ("linear",))
        self.net = nn.MLP(self.params, "safety", spec, rng)
        self._scale = _scale_clipped(np.ones(input_dim)) if input_dim >= SINGLE_TASK_DIM else None

    @property
    def multitask(self) -> bool:
        return self.input_dim == MULTI_TASK_DIM

    def _prep(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return x * self._scale if self._scale is not None else x

    def forward(self, x):
        return self.net.forward(self._prep(x))

    def backward(self, caches, df):
        dx = self.net.backward(caches, df)
        return dx * self._scale if self._scale is not None else dx

    def __call__(self, x) -> np.ndarray:
        f, _ = self.forward(x)
        return f[0] if np.ndim(x) == 1 else f

    def loss_and_grad(self, x, a, c, c_next):
        f, caches = self.forward(x)
        res = c_next - (c + np.sum(f * a, axis=1))
        loss = float(np.mean(res ** 2))
        df = (-2.0 / len(res)) * res[:, None] * a
        self.backward(caches, df)
        return loss


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SafetyTrainResult:
    model: SafetyModel
    final_loss: float
    losses: list = field(default_factory=list)

    def write_loss_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i + 1, v])


def dataset_loss(model: SafetyModel, ds: SafetyDataset, chunk: int = 8192) -> float:
    total = 0.0
    for i in range(0, len(ds), chunk):
        f = model(ds.x[i:i + chunk])
        res = ds.c_next[i:i + chunk] - (ds.c[i:i + chunk] + np.sum(f * ds.a[i:i + chunk], axis=1))
        total += float(np.sum(res ** 2))
    return total / len(ds)


def train_safety(ds: SafetyDataset, epochs: int = 20, lr: float = 1e-3, batch_size: int = 256,
                 seed: int = 0, hidden=(256, 256, 256), cfg: ConstraintConfig = ConstraintConfig(),
                 lr_decay: float = 1.0) -> SafetyTrainResult:
    """Fit ``f`` by minibatch Adam on the squared one-step prediction residual."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    model = SafetyModel(ds.x.shape[1], hidden, seed, cfg, ds.a.shape[1])
    opt = nn.Adam(model.params, nn.AdamHyper(lr=lr))
    rng = np.random.default_rng(seed + 1)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(ds))
        for i in range(0, len(ds), batch_size):
            idx = order[i:i + batch_size]
            loss = model.loss_and_grad(ds.x[idx], ds.a[idx], ds.c[idx], ds.c_next[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"safety loss {loss} at epoch {epoch}, batch {i // batch_size}")
            opt.step()
        losses.append(dataset_loss(model, ds))
        log.info("safety epoch %d loss %.6g", epoch + 1, losses[-1])
        if lr_decay != 1.0:
            opt.hyper = nn.AdamHyper(lr=opt.hyper.lr * lr_decay)
    return SafetyTrainResult(model, losses[-1], losses)


def save_model(model: SafetyModel, path) -> None:
    nn.save_params(model.params, path)


def load_model(path, cfg: ConstraintConfig = ConstraintConfig()) -> SafetyModel:
    params = nn.load_params(path)
    w0 = params["safety.l0.w"]
    hidden = tuple(params[f"safety.l{i}.w"].shape[1] for i in range(len(params) // 2 - 1))
    model = SafetyModel(w0.shape[0], hidden, 0, cfg, params[f"safety.l{len(hidden)}.w"].shape[1])
    model.params.assign(params)
    return model


# ---------------------------------------------------------------------------
# correction

FULL_BRAKE = np.array([0.0, 1.0])


@dataclass
class Correction:
    action: np.ndarray
    lam: float = 0.0
    fallback: bool = False
    active: bool = False


def project_action(a, f, c: float, clip: bool = True) -> Correction:
    """Closed-form minimal correction of ``a`` so that ``c + f . a* <= 0``."""
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    slack = float(f @ a) + c
    if slack <= 0.0:
        return Correction(a)
    ff = float(f @ f)
    if ff < 1e-12:
        return Correction(FULL_BRAKE.copy(), math.nan, fallback=True, active=True)
    lam = slack / ff
    out = a - lam * f
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return Correction(out, lam, active=True)


def project_speed(a, f, c: float) -> Correction:
    """Variant correcting the scalar a+ - a- instead of the raw pair."""
    a = np.asarray(a, dtype=np.float64)
    d = float(a[0] - a[1])
    fd = float(f[0] - f[1]) / 2.0
    slack = fd * d + c
    if slack <= 0.0:
        return Correction(a)
    if fd * fd < 1e-12:
        return Correction(FULL_BRAKE.copy(), math.nan, fallback=True, active=True)
    lam = slack / (fd * fd)
    d_new = min(max(d - lam * fd, -1.0), 1.0)
    return Correction(np.array([max(d_new, 0.0), max(-d_new, 0.0)]), lam, active=True)


def correct_action(x, a, c: float, model: SafetyModel, space: str = "raw") -> Correction:
    f = model(x)
    if space == "raw":
        return project_action(a, f, c)
    if space == "speed":
        return project_speed(a, f, c)
    raise ValueError(f"unknown correction space {space!r}")


class SafetyLayer:
    """Runtime wrapper: computes the constraint from the state and corrects."""

    def __init__(self, model: SafetyModel, space: str = "raw"):
        self.model = model
        self.cfg = model.cfg
        self.space = space
        self.activations = 0
        self.fallbacks = 0

    def __call__(self, s, a) -> Correction:
        ttc = state_ttc(s, self.cfg.ttc_cap)
        if ttc > self.cfg.activation_ttc:
            return Correction(np.asarray(a, dtype=np.float64))
        out = correct_action(clip_state(s, self.model.multitask), a, self.cfg.value(ttc),
                             self.model, self.space)
        if out.active:
            self.activations += 1
        if out.fallback:
            self.fallbacks += 1
            log.debug("safety fallback: vanishing slope at task %s", task_of(s[TASK_SLICE]))
        return out

