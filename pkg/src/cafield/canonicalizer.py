"""Foreground selection, candidate choice, losses, Siamese training and
inference producing rotation + translation + scale."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import fields, kernels, so3
from .autodiff import Tensor
from .network import FieldNet, NetConfig, foreground_cells, prepare_input


class NumericError(FloatingPointError):
    pass


# -- foreground and candidate selection ---------------------------------------

@dataclass
class ForegroundMask:
    cells: np.ndarray     # (Q, 3) lattice indices
    mask: np.ndarray      # boolean over the grid


def foreground_cluster(grid, seed=0):
    """Higher-mean cluster of a 2-means split of the grid densities."""
    cells = foreground_cells(grid, seed)
    mask = np.zeros(grid.values.shape, dtype=bool)
    mask[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    return ForegroundMask(cells, mask)


def select_best_transform(X, P, E):
    """Candidate minimizing mean ||X_i - E_j P_i||^2; ties go to the lowest
    index. Returns ``(index, E_j, residual)``."""
    X, P, E = (np.asarray(a, dtype=np.float64) for a in (X, P, E))
    res = np.array([_canon_value(X, P, Ej) for Ej in E])
    j = int(np.argmin(res))
    return j, E[j], float(res[j])


def _canon_value(X, P, Eb):
    # same arithmetic as loss_canon, so the residual equals the loss exactly
    return loss_canon(X, Tensor(P), Tensor(Eb)).item()


# -- losses -------------------------------------------------------------------

def loss_canon(X, P, Eb):
    """mean_i ||X_i - E_b P_i||^2."""
    d = ad.as_tensor(X) - ad.matmul(P, ad.transpose(Eb))
    return ad.reduce_mean(ad.reduce_sum(d * d, axis=1))


def _safe_sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = np.where(out > 0, g / (2 * out), 0.0)
        return (ga,)

    return Tensor._node(out, (a,), backward)


def ortho_targets(E):
    """U V^T per candidate from the SVD (no determinant correction)."""
    out = []
    for Ej in np.asarray(E):
        U, _, V = so3.svd3(Ej)
        out.append(U @ V.T)
    return np.array(out)


def loss_ortho(E):
    """(1/M) sum_j ||E_j - U_j V_j^T||_F with the SVD target held constant."""
    E = ad.as_tensor(E)
    d = E - Tensor(ortho_targets(E.data))
    per = _safe_sqrt(ad.reduce_sum(ad.reshape(d * d, (E.shape[0], 9)), axis=1))
    return ad.reduce_mean(per)


def loss_siamese(P1, P2):
    """Symmetric squared-L2 Chamfer distance with nearest-neighbor
    assignments frozen for the evaluation."""
    P1, P2 = ad.as_tensor(P1), ad.as_tensor(P2)
    _, i12 = kernels.nearest_sqdist(P1.data, P2.data)
    _, i21 = kernels.nearest_sqdist(P2.data, P1.data)
    d12 = P1 - ad.take(P2, i12)
    d21 = P2 - ad.take(P1, i21)
    return (ad.reduce_mean(ad.reduce_sum(d12 * d12, axis=1))
            + ad.reduce_mean(ad.reduce_sum(d21 * d21, axis=1)))


LOSS_WEIGHTS = {"canon": 2.0, "ortho": 1.0, "siamese": 1.0}


def total_loss(parts, config=None):
    """Weighted sum of the loss parts; the siamese term is skipped when
    absent or disabled."""
    w = dict(LOSS_WEIGHTS)
    siamese = True
    if config is not None:
        w = {"canon": config.w_canon, "ortho": config.w_ortho, "siamese": config.w_siamese}
        siamese = config.siamese
    total = None
    for key in ("canon", "ortho", "siamese"):
        if key not in parts or parts[key] is None or (key == "siamese" and not siamese):
            continue
        v = parts[key]
        val = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise NumericError(f"loss part {key} is not finite")
        term = v * w[key] if isinstance(v, Tensor) else w[key] * val
        total = term if total is None else total + term
    return 0.0 if total is None else total


# -- training -----------------------------------------------------------------

@dataclass
class TrainingConfig:
    epochs: int = 300
    batch_size: int = 2
    w_canon: float = 2.0
    w_ortho: float = 1.0
    w_siamese: float = 1.0
    lr: float = 6e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    siamese: bool = True
    resolution: int = 32
    depth_step: float = fields.DEFAULT_DEPTH_STEP
    checkpoint_every: int = 0
    checkpoint_dir: str = ""

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 2:
            raise ValueError("training pairs instances; batch_size must be 2")
        if min(self.w_canon, self.w_ortho, self.w_siamese) <= 0:
            raise ValueError("loss weights must be positive")
        return self


@dataclass
class TrainItem:
    category: str
    provider: object
    bounds: fields.SceneBounds


def make_items(manifest, source="synthetic", d=fields.DEFAULT_DEPTH_STEP):
    items = []
    for e in manifest.entries:
        prov = manifest.provider(e, source, d)
        items.append(TrainItem(e.category, prov, fields.scene_probe(prov, d)))
    return items


def _pairs(items, rng):
    """Shuffle within each category and pair neighbors; an odd leftover is
    paired with a random other member."""
    by_cat = {}
    for i, it in enumerate(items):
        by_cat.setdefault(it.category, []).append(i)
    pairs = []
    for cat in sorted(by_cat):
        idx = list(rng.permutation(by_cat[cat]))
        if len(idx) % 2:
            idx.append(int(rng.choice(idx[:-1])))
        pairs += [(int(idx[i]), int(idx[i + 1])) for i in range(0, len(idx), 2)]
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def instance_forward(net, grid, training, seed=0):
    inp = prepare_input(grid, net.config, seed)
    out = net.forward(inp, training=training)
    return inp, out


def pair_losses(net, grids, config, training=True):
    """Loss parts for a pair of object grids sharing the network weights."""
    canon, ortho, Ps = [], [], []
    for g in grids:
        inp, out = instance_forward(net, g, training, config.seed)
        j, _, _ = select_best_transform(inp.query, out.P.data, out.E.data)
        canon.append(loss_canon(inp.query, out.P, ad.take(out.E, j)))
        ortho.append(loss_ortho(out.E))
        Ps.append(out.P)
    parts = {"canon": ad.scale(canon[0] + canon[1], 0.5),
             "ortho": ad.scale(ortho[0] + ortho[1], 0.5)}
    if config.siamese:
        parts["siamese"] = loss_siamese(Ps[0], Ps[1])
    return parts


@dataclass
class EpochRecord:
    epoch: int
    canon: float
    ortho: float
    siamese: float | None
    total: float

    def line(self):
        cols = [str(self.epoch), f"{self.canon:.9e}", f"{self.ortho:.9e}"]
        if self.siamese is not None:
            cols.append(f"{self.siamese:.9e}")
        cols.append(f"{self.total:.9e}")
        return " ".join(cols)


def log_header(config, net_config):
    cols = "epoch canon ortho siamese total" if config.siamese else "epoch canon ortho total"
    hp = (f"# epochs={config.epochs} batch={config.batch_size} lr={config.lr:g} "
          f"wd={config.weight_decay:g} w_canon={config.w_canon:g} w_ortho={config.w_ortho:g} "
          f"w_siamese={config.w_siamese:g} siamese={'on' if config.siamese else 'off'} "
          f"signal={net_config.signal} weighting={net_config.weighting} "
          f"l_max={net_config.l_max} M={net_config.M} resolution={config.resolution} seed={config.seed}")
    return [hp, f"# {cols}"]


def train(items, config=TrainingConfig(), net_config=NetConfig(), net=None, on_epoch=None):
    """Siamese training with fresh Haar rotations per instance per step.

    ``items`` is a list of :class:`TrainItem`. Returns ``(net, records)``.
    """
    config.validate()
    if not items:
        raise ad.UsageError("training needs at least one instance")
    if config.siamese:
        counts = {}
        for it in items:
            counts[it.category] = counts.get(it.category, 0) + 1
        if min(counts.values()) < 2:
            raise ad.UsageError("siamese training needs >= 2 instances per category")
    net = FieldNet(net_config, seed=config.seed) if net is None else net
    opt = ad.Adam(net.parameters(), lr=config.lr, weight_decay=config.weight_decay,
                  betas=(config.beta1, config.beta2), eps=config.adam_eps)
    rng = np.random.default_rng([config.seed, 7])
    records = []
    for epoch in range(1, config.epochs + 1):
        sums = {"canon": 0.0, "ortho": 0.0, "siamese": 0.0, "total": 0.0}
        pairs = _pairs(items, rng) if len(items) > 1 else [(0, 0)]
        for a, b in pairs:
            grids = []
            for i in (a, b):
                R = so3.random_rotation(rng)
                grids.append(fields.resample_object_grid(items[i].provider, items[i].bounds,
                                                         config.resolution, config.depth_step, R))
            parts = pair_losses(net, grids, config)
            loss = total_loss(parts, config)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] += v.item()
            sums["total"] += loss.item()
            if not math.isfinite(loss.item()):
                raise NumericError(f"loss diverged at epoch {epoch}")
        n = len(pairs)
        rec = EpochRecord(epoch, sums["canon"] / n, sums["ortho"] / n,
                          sums["siamese"] / n if config.siamese else None, sums["total"] / n)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if config.checkpoint_every and config.checkpoint_dir and epoch % config.checkpoint_every == 0:
            net.save(f"{config.checkpoint_dir}/epoch{epoch:04d}", {"epoch": epoch})
    return net, records


# -- inference ----------------------------------------------------------------

@dataclass
class CanonicalizationResult:
    rotation: np.ndarray       # E_b projected onto SO(3)
    translation: np.ndarray    # scene-frame object center c
    scale: float               # 2 / l
    P: np.ndarray              # canonical coordinates over C_f
    fg: np.ndarray             # C_f lattice indices
    index: int
    residual: float
    E_raw: np.ndarray = field(default=None, repr=False)

    def record(self, name=""):
        vals = [*self.rotation.ravel(), *self.translation, self.scale]
        body = " ".join(repr(float(v)) for v in vals)
        return f"{name} {body} {self.index} {self.residual!r}".strip()

    def to_dict(self):
        return {"rotation": self.rotation.ravel().tolist(), "translation": self.translation.tolist(),
                "scale": self.scale, "index": self.index, "residual": self.residual}


def canonicalize(source, net, resolution=32, d=fields.DEFAULT_DEPTH_STEP, seed=0, R_aug=None):
    """Full inference on a provider (or a scene grid, read through trilinear
    interpolation): probe, resample, forward, pick and orthonormalize E_b."""
    if isinstance(source, fields.DensityGrid):
        source = fields.GridProvider(source, d)
    bounds = fields.scene_probe(source, d)
    grid = fields.resample_object_grid(source, bounds, resolution, d, R_aug)
    inp, out = instance_forward(net, grid, False, seed)
    j, Eb, res = select_best_transform(inp.query, out.P.data, out.E.data)
    R = so3.nearest_rotation(Eb)
    return CanonicalizationResult(R, bounds.center.copy(), 2.0 / bounds.diagonal,
                                  out.P.data.copy(), inp.fg, j, res, out.E.data.copy())


def training_config_dict(config):
    return asdict(config)
