"""RAdam training loop, role-swap batching, checkpointing and evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import logging
import math
import os
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .errors import ConfigError, ContractError, NumericalError, ShapeError
from .losses import LossWeights, total_loss
from .metrics import STRUCTURES, MetricsReport, evaluate_case
from .network import Network, NetworkSpec, build, load_checkpoint, save_checkpoint
from .synth import NUM_STRUCTURES, PhantomPair, sample_patches
from .warping import make_multires_targets, one_hot, warp_labels

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "total", "dice", "ncc", "bend", "high", "mid", "low")


@dataclass
class TrainConfig:
    variant: str = "CrossStitch"
    filters: tuple = (8, 16, 32, 16, 8)
    n_patch: int = 48
    iterations: int = 2000
    batch_size: int = 2
    learning_rate: float = 1e-4
    w_dice: float = 1.0
    w_ncc: float = 1.0
    w_bend: float = 0.5
    resolution_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    mixed_bending: bool = True
    seed: int = 0
    num_structures: int = NUM_STRUCTURES
    crossstitch_layers: tuple = (3, 6, 9, 12)
    seg_path_full_input: bool = False
    leaky_slope: float = 0.2
    checkpoint_interval: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.filters = tuple(self.filters)
        self.resolution_weights = tuple(self.resolution_weights)
        self.crossstitch_layers = tuple(self.crossstitch_layers)
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        self.network_spec()

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.variant, self.filters, self.n_patch, self.num_structures,
                           self.crossstitch_layers, self.seg_path_full_input, self.leaky_slope)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_dice, self.w_ncc, self.w_bend, self.resolution_weights, self.mixed_bending)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("filters", "resolution_weights", "crossstitch_layers"):
            d[k] = list(d[k])
        return d


# optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "step": self.step, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(dict(d["m"]), dict(d["v"]), int(d["step"]), d["beta1"], d["beta2"], d["eps"])


def rectification(step: int, beta2: float) -> Optional[float]:
    """Variance rectification factor, or None while the SMA length is <= 4."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** step
    rho_t = rho_inf - 2.0 * step * b2t / (1.0 - b2t)
    if rho_t <= 4.0:
        return None
    return math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))


def radam_step(state: OptimizerState, params: dict, grads: dict, lr: float) -> None:
    """One rectified-Adam update, in place on ``params`` (name -> Tensor) and ``state``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    r = rectification(t, b2)
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        m_hat = m / dt(bc1)
        if r is None:
            p.data -= dt(lr) * m_hat
        else:
            denom = np.sqrt(v / dt(bc2)) + dt(state.eps)
            p.data -= dt(lr * r) * m_hat / denom


# batching -------------------------------------------------------------------

def make_batch(pairs: Sequence[PhantomPair], iteration: int, seed: int, n_patch: int,
               batch_size: int = 2) -> dict:
    """``batch_size`` stratified patch pairs plus their fixed/moving role-swapped copies."""
    if not pairs:
        raise ContractError("need at least one training pair")
    rng = np.random.default_rng([seed, iteration])
    patches = []
    for j in range(batch_size):
        pair = pairs[int(rng.integers(len(pairs)))]
        patches += sample_patches(pair, n_patch, 1, rng, offset=iteration * batch_size + j)
    fixed = np.stack([p["fixed"] for p in patches])[:, None]
    moving = np.stack([p["moving"] for p in patches])[:, None]
    fseg = np.stack([p["fixed_seg"] for p in patches])
    mseg = np.stack([p["moving_seg"] for p in patches])
    return {
        "fixed": np.concatenate([fixed, moving]).astype(np.float32),
        "moving": np.concatenate([moving, fixed]).astype(np.float32),
        "fixed_seg": np.concatenate([fseg, mseg]),
        "moving_seg": np.concatenate([mseg, fseg]),
        "strata": [p["stratum"] for p in patches] * 2,
    }


def batch_targets(batch: dict, num_structures: int) -> dict:
    return make_multires_targets(batch["fixed"], one_hot(batch["fixed_seg"], num_structures),
                                 batch["moving"], one_hot(batch["moving_seg"], num_structures))


# training -------------------------------------------------------------------

@dataclass
class TrainResult:
    net: Network
    optimizer: OptimizerState
    log: list
    iteration: int


def format_log_row(row: dict) -> str:
    return "\t".join(str(row["iter"]) if k == "iter" else repr(float(row.get(k, 0.0))) for k in LOG_FIELDS)


def train_step(net: Network, opt: OptimizerState, batch: dict, cfg: TrainConfig, weights: LossWeights):
    targets = batch_targets(batch, cfg.num_structures)
    moving_seg = one_hot(batch["moving_seg"], cfg.num_structures)
    outputs = net.forward(batch["fixed"], batch["moving"], moving_seg, training=True)
    loss, breakdown = total_loss(cfg.variant, outputs, targets, weights)
    if not np.isfinite(loss.data).all():
        return loss, breakdown, None
    grads = backward(loss, net.parameters())
    radam_step(opt, net.params, dict(zip(net.params.keys(), grads)), cfg.learning_rate)
    return loss, breakdown, grads


def _dump_batch(path, batch, it):
    np.savez(path, iteration=it, fixed=batch["fixed"], moving=batch["moving"],
             fixed_seg=batch["fixed_seg"], moving_seg=batch["moving_seg"])


def train(cfg: TrainConfig, pairs: Sequence[PhantomPair], checkpoint_path: Optional[str] = None,
          log_path: Optional[str] = None, resume: Optional[str] = None, stop_at: Optional[int] = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run ``cfg.iterations`` RAdam steps (or up to ``stop_at``).

    The batch for iteration ``i`` depends only on ``(cfg.seed, i)``, so a run
    resumed from a checkpoint repeats the uninterrupted one exactly.
    """
    weights = cfg.loss_weights()
    if resume:
        net, opt_d, meta = load_checkpoint(resume)
        opt = OptimizerState.from_dict(opt_d)
        start = int(meta["iteration"])
    else:
        net = build(cfg.network_spec(), cfg.seed)
        opt = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        start = 0
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    rows = []
    log_fh = None
    if log_path:
        log_fh = open(log_path, "a" if resume else "w")
        if not resume:
            log_fh.write("\t".join(LOG_FIELDS) + "\n")

    def save(it):
        if checkpoint_path:
            save_checkpoint(checkpoint_path, net, opt.to_dict(), {"iteration": it, "config": cfg.to_dict()})

    try:
        for it in range(start + 1, end + 1):
            batch = make_batch(pairs, it, cfg.seed, cfg.n_patch, cfg.batch_size)
            loss, breakdown, grads = train_step(net, opt, batch, cfg, weights)
            if grads is None:
                dump = (checkpoint_path or "crossreg") + f".nan_batch_{it}.npz"
                _dump_batch(dump, batch, it)
                raise NumericalError(f"non-finite loss at iteration {it}; batch dumped to {dump}")
            row = {"iter": it, "total": loss.item(),
                   "dice": breakdown.get("dice_seg", 0.0) + breakdown.get("dice_reg", 0.0),
                   "ncc": breakdown.get("ncc", 0.0), "bend": breakdown.get("bend", 0.0),
                   "high": breakdown["high"], "mid": breakdown["mid"], "low": breakdown["low"]}
            rows.append(row)
            if log_fh:
                log_fh.write(format_log_row(row) + "\n")
            if progress:
                progress(row)
            if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                save(it)
        save(end)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(net, opt, rows, end)


def read_log(path) -> list:
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            f = line.rstrip("\n").split("\t")
            rows.append({k: (int(v) if k == "iter" else float(v)) for k, v in zip(header, f)})
    return rows


# inference and evaluation ---------------------------------------------------

def default_window(size: int) -> int:
    """Smallest valid input window whose high-resolution output covers ``size`` voxels."""
    return int(math.ceil(size / 4.0)) * 4 + 40


def infer_volume(net: Network, fixed: np.ndarray, moving: np.ndarray, moving_seg: np.ndarray,
                 window: Optional[int] = None) -> dict:
    """Full-volume high-resolution outputs by tiling valid windows.

    Volumes are edge-replicated by 20 voxels (plus whatever completes the
    last tile) so that every voxel gets a prediction.  Tiles step by the
    output extent, so stitched outputs do not overlap.
    """
    S = fixed.shape
    window = window or max(default_window(s) for s in S)
    if window % 4 or window < 44:
        raise ConfigError(f"window {window} must be >= 44 and divisible by 4")
    o = window - 40
    tiles = [int(math.ceil(s / o)) for s in S]
    pads = [(20, t * o + 40 - s - 20) for t, s in zip(tiles, S)]
    C = net.spec.num_structures
    fp = np.pad(fixed, pads, mode="edge")
    mp = np.pad(moving, pads, mode="edge")
    sp = np.pad(moving_seg, pads, mode="edge")
    seg_out = np.zeros((C,) + tuple(t * o for t in tiles), dtype=np.float32) if net.spec.has_seg else None
    dvf_out = np.zeros((3,) + tuple(t * o for t in tiles), dtype=np.float32) if net.spec.has_dvf else None
    with no_grad():
        for iz in range(tiles[0]):
            for iy in range(tiles[1]):
                for ix in range(tiles[2]):
                    z, y, x = iz * o, iy * o, ix * o
                    win = (slice(z, z + window), slice(y, y + window), slice(x, x + window))
                    dst = (slice(None), slice(z, z + o), slice(y, y + o), slice(x, x + o))
                    out = net.forward(fp[win][None, None], mp[win][None, None],
                                      one_hot(sp[win], C)[None], training=False)
                    if seg_out is not None:
                        seg_out[dst] = out.seg("high").data[0]
                    if dvf_out is not None:
                        dvf_out[dst] = out.dvf("high").data[0]
    crop = (slice(None),) + tuple(slice(0, s) for s in S)
    result = {}
    if seg_out is not None:
        result["seg_logits"] = seg_out[crop]
        result["seg_labels"] = seg_out[crop].argmax(axis=0).astype(np.uint8)
    if dvf_out is not None:
        result["dvf"] = dvf_out[crop]
        result["reg_labels"] = warp_labels(moving_seg, dvf_out[crop]).astype(np.uint8)
    return result


def evaluate(net, pairs: Sequence[PhantomPair], output_selection: str = "both", window: Optional[int] = None,
             include_identity: bool = False, case_names: Optional[Sequence[str]] = None,
             method: Optional[str] = None) -> MetricsReport:
    """Metrics for every pair against its fixed segmentation.

    ``net`` may be a Network or a checkpoint path.  Dual-output variants get
    one row group per output path; ``output_selection`` restricts this to
    ``"segmentation"`` or ``"registration"``.
    """
    if isinstance(net, (str, os.PathLike)):
        net = load_checkpoint(net)[0]
    if output_selection not in ("both", "segmentation", "registration"):
        raise ConfigError(f"unknown output selection {output_selection!r}")
    method = method or net.spec.variant
    report = MetricsReport()
    names = STRUCTURES[: net.spec.num_structures]
    for i, pair in enumerate(pairs):
        case = case_names[i] if case_names else f"case{i:03d}"
        res = infer_volume(net, pair.fixed, pair.moving, pair.moving_seg, window)
        if "seg_labels" in res and output_selection in ("both", "segmentation"):
            report.add_case(method, "Segmentation", case,
                            evaluate_case(res["seg_labels"], pair.fixed_seg, pair.spacing, names))
        if "reg_labels" in res and output_selection in ("both", "registration"):
            report.add_case(method, "Registration", case,
                            evaluate_case(res["reg_labels"], pair.fixed_seg, pair.spacing, names))
        if include_identity:
            report.add_case("Unwarped", "Registration", case,
                            evaluate_case(pair.moving_seg, pair.fixed_seg, pair.spacing, names))
    return report
