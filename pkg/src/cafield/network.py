"""Rotation-equivariant feature extractor on density-grid samples.

Pipeline for one object grid::

    level 0 (occupied cells, inputs sigma_D and a type-1 signal)
      -> EQConv + nonlinearity -> level 1 -> ... -> level 3
      -> norm-argmax global pool F^l
      -> invariant embedding H at query points -> head_P (canonical coords)
      -> head_E (M candidate 3x3 transforms from F^1)

Positions are in "net units": ``(x - c) * 2 / l`` so the object grid spans
[-1, 1]^3. Type-l blocks are stored as (points, 2l+1, channels) in the
real-harmonic basis of :mod:`cafield.so3`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import kernels, so3
from .autodiff import Tensor
from .fields import DegenerateError, finite_gradient, kmeans_1d

N_LEVELS = 4
N_SHELLS = 3


@dataclass(frozen=True)
class NetConfig:
    l_max: int = 3
    channels: tuple = (8, 16, 32)
    neighbors: int = 512
    n_shells: int = N_SHELLS
    M: int = 4
    embed: int = 128
    weighting: str = "direct"       # or "local-average"
    signal: str = "gradient"        # or "xyz"
    floor: float = 0.01
    sphere_samples: int = 64
    avg_radius: float = 2.0         # local-average radius in lattice spacings

    def validate(self):
        if not 1 <= self.l_max <= so3.L_MAX_SUPPORTED:
            raise ValueError(f"l_max must be in 1..{so3.L_MAX_SUPPORTED}")
        if len(self.channels) != N_LEVELS - 1 or min(self.channels) < 1:
            raise ValueError("need one positive channel count per conv layer")
        if self.neighbors < 1 or self.M < 1 or self.embed < 1:
            raise ValueError("neighbors, M and embed must be >= 1")
        if self.weighting not in ("direct", "local-average"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.signal not in ("gradient", "xyz"):
            raise ValueError(f"unknown signal {self.signal!r}")
        return self


# -- hierarchy ----------------------------------------------------------------

@dataclass
class Level:
    cells: np.ndarray      # (P, 3) integer lattice indices
    pos: np.ndarray        # (P, 3) net-unit positions
    density: np.ndarray    # (P,) sigma_D at the cells
    spacing: float         # net-unit spacing of this level's stride


def grid_net_coords(grid):
    """Net-unit coordinates of every lattice cell, (N, N, N, 3)."""
    n = grid.values.shape[0]
    ax = -1.0 + (np.arange(n) + 0.5) * 2.0 / n
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


def build_hierarchy(grid, floor=0.01, n_levels=N_LEVELS):
    """Point sets at resolution fractions 1, 1/2, 1/4, 1/8.

    Level k keeps every 2^k-th cell per axis (offset 2^k // 2, so coarse
    cells are also fine cells) whose density exceeds ``floor``. An empty
    level falls back to the previous level's cells, so a lone occupied cell
    is present everywhere.
    """
    vals = grid.values
    n = vals.shape[0]
    if vals.shape != (n, n, n):
        raise ValueError("hierarchy needs a cubic grid")
    coords = grid_net_coords(grid)
    occ0 = np.argwhere(vals > floor)
    if occ0.size == 0:
        raise DegenerateError("no cell exceeds the occupancy floor")
    levels = []
    for k in range(n_levels):
        s = 2 ** k
        ax = np.arange(s // 2, n, s)
        sub = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
        cells = sub[vals[sub[:, 0], sub[:, 1], sub[:, 2]] > floor] if ax.size else sub[:0]
        if cells.shape[0] == 0:
            cells = occ0 if k == 0 else levels[-1].cells
        levels.append(Level(cells, coords[cells[:, 0], cells[:, 1], cells[:, 2]],
                            vals[cells[:, 0], cells[:, 1], cells[:, 2]], s * 2.0 / n))
    return levels


def local_average(values, radius):
    """Mean of the lattice values within ``radius`` cells of every cell
    (samples outside the grid are excluded)."""
    r = int(math.floor(radius))
    offs = [(i, j, k) for i in range(-r, r + 1) for j in range(-r, r + 1)
            for k in range(-r, r + 1) if i * i + j * j + k * k <= radius * radius + 1e-9]
    total = np.zeros_like(values)
    count = np.zeros_like(values)
    n = values.shape

    def sl(o, size):
        return (slice(max(o, 0), size + min(o, 0)), slice(max(-o, 0), size - max(o, 0)))

    for o in offs:
        dst, src = zip(*(sl(oi, ni) for oi, ni in zip(o, n)))
        total[dst] += values[src]
        count[dst] += 1
    return total / count


def density_weight(variant, grid, cells, radius=2.0):
    """f_w at lattice ``cells``: sigma_D itself or its local ball average."""
    cells = np.asarray(cells)
    if variant == "direct":
        v = grid.values
    elif variant == "local-average":
        v = local_average(grid.values, radius)
    else:
        raise ValueError(f"unknown weighting {variant!r}")
    return v[cells[:, 0], cells[:, 1], cells[:, 2]]


# -- geometry -----------------------------------------------------------------

def knn(targets, sources, k):
    """Indices of the ``k`` nearest sources per target. Squared distances
    are rounded to 9 decimals and ties go to the lower index, so neighbor
    sets survive an exact rotation of both point sets."""
    if sources.shape[0] == 0 or targets.shape[0] == 0:
        raise DegenerateError("empty neighbor set")
    k = min(k, sources.shape[0])
    d2 = ((targets[:, None, :] - sources[None, :, :]) ** 2).sum(-1)
    order = np.argsort(np.round(d2, 9), axis=1, kind="stable")
    return order[:, :k]


def shell_radii(spacing, n_shells=N_SHELLS):
    return spacing * np.arange(n_shells), spacing / 2.0


def conv_kernel(targets, sources, idx, l_max, spacing, n_shells=N_SHELLS):
    """K[t, k, q] with q = shell * (l_max+1)^2 + n^2 + a, the radial shell
    times Y^n_a of the offset direction, averaged over neighbors.
    Directional terms vanish at zero offset."""
    u = targets[:, None, :] - sources[idx]
    r = np.linalg.norm(u, axis=-1)
    nz = r > 1e-12
    dirs = np.zeros_like(u)
    dirs[nz] = u[nz] / r[nz, None]
    dirs[~nz] = (0.0, 0.0, 1.0)
    Y = so3.sh_stack(l_max, dirs.reshape(-1, 3)).reshape(*r.shape, -1)
    Y[~nz, 1:] = 0.0
    radii, tau = shell_radii(spacing, n_shells)
    phi = np.exp(-((r[..., None] - radii) ** 2) / (2 * tau * tau))
    K = (phi[..., :, None] * Y[..., None, :]).reshape(*r.shape, -1)
    return K / idx.shape[1]


@dataclass
class ConvGeometry:
    idx: np.ndarray        # (T, k) source indices
    K: np.ndarray          # (T, k, Q)
    weight: np.ndarray     # (T,) density weight f_w


@dataclass
class NetInput:
    """Everything the network consumes for one object grid."""
    levels: list
    type0: np.ndarray      # (P0,) sigma_D at level 0
    type1: np.ndarray      # (P0, 3) signal in SH order
    weights: list          # f_w per conv layer (targets of level k+1)
    query: np.ndarray      # (Q, 3) net-unit positions of the foreground cells
    fg: np.ndarray         # (Q, 3) lattice indices of the foreground cells
    geometry: list = field(default_factory=list)

    def rotated(self, R):
        """Exactly rotated copy: positions by R, type-1 signal by D^1(R)."""
        R = so3.check_rotation(R)
        D1 = so3.wigner_d(1, R)
        levels = [replace(lv, pos=lv.pos @ R.T) for lv in self.levels]
        return NetInput(levels, self.type0.copy(), self.type1 @ D1.T,
                        [w.copy() for w in self.weights], self.query @ R.T, self.fg.copy())


def build_geometry(inp, config):
    geo = []
    for k in range(N_LEVELS - 1):
        src, tgt = inp.levels[k], inp.levels[k + 1]
        idx = knn(tgt.pos, src.pos, config.neighbors)
        K = conv_kernel(tgt.pos, src.pos, idx, config.l_max, tgt.spacing, config.n_shells)
        geo.append(ConvGeometry(idx, K, inp.weights[k]))
    inp.geometry = geo
    return inp


def foreground_cells(grid, seed=0):
    """Lattice indices of the higher-mean 2-means density cluster."""
    labels, means = kmeans_1d(grid.values.ravel(), 2, seed)
    if means[1] <= means[0]:
        raise DegenerateError("foreground cluster is not denser than background")
    return np.argwhere(labels.reshape(grid.values.shape) == 1)


def prepare_input(grid, config, seed=0, fg=None):
    """Hierarchy, input signals, density weights and convolution geometry."""
    config.validate()
    levels = build_hierarchy(grid, config.floor)
    c0 = levels[0].cells
    if config.signal == "gradient":
        g = finite_gradient(grid)[c0[:, 0], c0[:, 1], c0[:, 2]] * grid.spacing
    else:
        g = levels[0].pos
    type1 = g @ so3.XYZ_TO_SH.T
    weights = []
    for k in range(1, N_LEVELS):
        variant = config.weighting if k == 1 else "direct"
        weights.append(density_weight(variant, grid, levels[k].cells, config.avg_radius))
    if fg is None:
        fg = foreground_cells(grid, seed)
    query = grid_net_coords(grid)[fg[:, 0], fg[:, 1], fg[:, 2]]
    inp = NetInput(levels, levels[0].density.copy(), type1, weights, query, fg)
    return build_geometry(inp, config)


# -- differentiable pieces ----------------------------------------------------

def aggregate_op(K, idx, S):
    """out[t, q, f] = sum_k K[t, k, q] S[idx[t, k], f]; K is geometry
    (no gradient), the adjoint w.r.t. S is a scatter."""
    n_src = S.shape[0]
    out = kernels.aggregate(K, idx, S.data)

    def backward(g):
        return (kernels.scatter(K, idx, g, n_src),)

    return Tensor._node(out, (S,), backward)


def _paths(l_max, l_in, J):
    return [n for n in range(l_max + 1) if so3.cg_admissible(n, l_in, J)]


def _cg_mixer(l_max, l_in, J, n_shells):
    """G[q, b, z]: maps aggregated (shell, n, a) x b products to
    z = (shell, path, j) outputs of type J via Clebsch-Gordan."""
    paths = _paths(l_max, l_in, J)
    nq = (l_max + 1) ** 2
    dl, dJ = 2 * l_in + 1, 2 * J + 1
    G = np.zeros((n_shells * nq, dl, n_shells * len(paths) * dJ))
    for s in range(n_shells):
        for p, n in enumerate(paths):
            Q = so3.cg_matrix(n, l_in, J).reshape(dJ, 2 * n + 1, dl)
            z0 = (s * len(paths) + p) * dJ
            q0 = s * nq + n * n
            G[q0:q0 + 2 * n + 1, :, z0:z0 + dJ] = Q.transpose(1, 2, 0)
    return G, len(paths)


class EQConv:
    """Tensor-field convolution: CG-combined shell x harmonic kernels summed
    over neighbors, per-type channel mixing, type-0 bias, density weight."""

    def __init__(self, name, in_channels, out_channels, l_max, rng, n_shells=N_SHELLS):
        self.name = name
        self.in_channels = dict(in_channels)    # l -> C_in
        self.out_channels = out_channels
        self.l_max = l_max
        self.mixers = {}
        self.params = {}
        for J in range(l_max + 1):
            fan = 0
            for l_in, c_in in self.in_channels.items():
                G, npath = _cg_mixer(l_max, l_in, J, n_shells)
                if npath:
                    self.mixers[(l_in, J)] = (Tensor(G), n_shells * npath)
                    fan += n_shells * npath * c_in
            for l_in, c_in in self.in_channels.items():
                if (l_in, J) in self.mixers:
                    npath = self.mixers[(l_in, J)][1]
                    w = rng.normal(scale=math.sqrt(2.0 / fan), size=(npath, c_in, out_channels))
                    self.params[f"{name}.W{l_in}_{J}"] = ad.parameter(w, f"{name}.W{l_in}_{J}")
        self.params[f"{name}.b"] = ad.parameter(np.zeros(out_channels), f"{name}.b")

    def __call__(self, feats, geo):
        T = geo.idx.shape[0]
        w = Tensor(geo.weight[:, None, None])
        out = {}
        agg = {}
        for l_in, f in feats.items():
            P = f.shape[0]
            A = aggregate_op(geo.K, geo.idx, ad.reshape(f, (P, -1)))
            agg[l_in] = ad.reshape(A, (T, A.shape[1], 2 * l_in + 1, f.shape[2]))
        for J in range(self.l_max + 1):
            acc = None
            for l_in in feats:
                if (l_in, J) not in self.mixers:
                    continue
                G, npz = self.mixers[(l_in, J)]
                X = ad.einsum("tqbc,qbz->tzc", agg[l_in], G)
                X = ad.reshape(X, (T, npz, 2 * J + 1, X.shape[2]))
                y = ad.einsum("tpjc,pco->tjo", X, self.params[f"{self.name}.W{l_in}_{J}"])
                acc = y if acc is None else acc + y
            if J == 0:
                acc = acc + self.params[f"{self.name}.b"]
            out[J] = acc * w
        return out


class Nonlinearity:
    """ISHT to sphere samples, batch norm, ReLU, per-sample channel MLP, FSHT."""

    def __init__(self, name, channels, l_max, sampling, rng):
        self.name = name
        self.l_max = l_max
        self.inv = Tensor(sampling.inverse_matrix)
        self.fwd = Tensor(sampling.forward_matrix)
        self.bn = ad.BatchNorm(channels)
        self.params = {
            f"{name}.W": ad.parameter(rng.normal(scale=math.sqrt(2.0 / channels), size=(channels, channels)),
                                      f"{name}.W"),
            f"{name}.b": ad.parameter(np.zeros(channels), f"{name}.b"),
            f"{name}.bn.gamma": self.bn.gamma,
            f"{name}.bn.beta": self.bn.beta,
        }

    def __call__(self, feats, training, use_bn=True):
        coeffs = ad.concat([feats[l] for l in range(self.l_max + 1)], axis=1)
        sig = ad.einsum("sq,tqc->tsc", self.inv, coeffs)
        if use_bn:
            sig = self.bn(sig, training)
        sig = ad.relu(sig)
        sig = ad.matmul(sig, self.params[f"{self.name}.W"]) + self.params[f"{self.name}.b"]
        back = ad.einsum("qs,tsc->tqc", self.fwd, sig)
        return {l: ad.take(back, (slice(None), slice(l * l, (l + 1) ** 2))) for l in range(self.l_max + 1)}


def global_pool(feats):
    """Per (l, channel), the block of the point with the largest block norm.
    Norms within a relative 1e-9 of the maximum count as ties; the lowest
    point index wins."""
    out, winners = {}, {}
    for l, f in feats.items():
        if f.shape[0] == 0:
            raise DegenerateError("global pool over an empty point set")
        norms = np.sqrt((f.data ** 2).sum(axis=1))          # (P, C)
        top = norms.max(axis=0)
        win = np.argmax(norms >= top * (1 - 1e-9), axis=0)
        m = np.arange(2 * l + 1)[:, None]
        c = np.arange(f.shape[2])[None, :]
        out[l] = ad.take(f, (win[None, :], m, c))           # (2l+1, C)
        winners[l] = win
    return out, winners


def invariant_embedding(F, X, W, b):
    """H = concat_l <F^l_c, Z^l(X)> followed by a linear map."""
    parts = [ad.einsum("qm,mc->qc", Tensor(so3.solid_sh(l, X)), F[l]) for l in sorted(F)]
    return ad.matmul(ad.concat(parts, axis=1), W) + b


@dataclass
class HeadOutputs:
    P: Tensor          # (Q, 3) canonical coordinates at the query points
    E: Tensor          # (M, 3, 3) candidate transforms
    H: Tensor          # (Q, embed)
    F: dict            # pooled global features per type
    pool_winners: dict


class FieldNet:
    """Parameters and forward pass. ``params`` maps names to Tensors;
    batch-norm running statistics live in ``bn`` and are checkpointed."""

    def __init__(self, config=NetConfig(), seed=0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        L, C = config.l_max, config.channels
        self.sampling = so3.SphereSampling(L, config.sphere_samples)
        self.convs, self.nonlins = [], []
        in_ch = {0: 1, 1: 1}
        for k in range(N_LEVELS - 1):
            self.convs.append(EQConv(f"conv{k}", in_ch, C[k], L, rng, config.n_shells))
            self.nonlins.append(Nonlinearity(f"nl{k}", C[k], L, self.sampling, rng))
            in_ch = {l: C[k] for l in range(L + 1)}
        c_last = C[-1]
        width = (L + 1) * c_last
        self.params = {}
        for mod in self.convs + self.nonlins:
            self.params.update(mod.params)

        def lin(name, n_in, n_out, scale=None):
            s = math.sqrt(2.0 / n_in) if scale is None else scale
            self.params[f"{name}.W"] = ad.parameter(rng.normal(scale=s, size=(n_in, n_out)), f"{name}.W")
            self.params[f"{name}.b"] = ad.parameter(np.zeros(n_out), f"{name}.b")

        lin("embed", width, config.embed)
        lin("headP.0", config.embed, 128)
        lin("headP.1", 128, 64)
        lin("headP.2", 64, 3, scale=math.sqrt(1.0 / 64))
        self.head_bn = [ad.BatchNorm(128), ad.BatchNorm(64)]
        for i, bn in enumerate(self.head_bn):
            self.params[f"headP.bn{i}.gamma"] = bn.gamma
            self.params[f"headP.bn{i}.beta"] = bn.beta
        self.params["headE.W"] = ad.parameter(
            rng.normal(scale=1.0 / math.sqrt(c_last), size=(config.M, c_last, 3)), "headE.W")

    # -- parameters and checkpoints ---------------------------------------
    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def batch_norms(self):
        out = {f"nl{k}.bn": nl.bn for k, nl in enumerate(self.nonlins)}
        out.update({f"headP.bn{i}": bn for i, bn in enumerate(self.head_bn)})
        return out

    def state_dict(self):
        arrays = {k: v.data.copy() for k, v in self.params.items()}
        for name, bn in self.batch_norms().items():
            arrays[f"{name}.running_mean"] = bn.running_mean.copy()
            arrays[f"{name}.running_var"] = bn.running_var.copy()
        return arrays

    def load_state_dict(self, arrays):
        for k, v in self.params.items():
            if k not in arrays or arrays[k].shape != v.shape:
                raise ValueError(f"checkpoint missing or mis-shaped parameter {k}")
            v.data = arrays[k].copy()
        for name, bn in self.batch_norms().items():
            bn.running_mean = arrays[f"{name}.running_mean"].copy()
            bn.running_var = arrays[f"{name}.running_var"].copy()

    def config_meta(self):
        c = self.config
        return {"l_max": c.l_max, "channels": ",".join(map(str, c.channels)),
                "neighbors": c.neighbors, "n_shells": c.n_shells, "M": c.M, "embed": c.embed,
                "weighting": c.weighting, "signal": c.signal, "floor": c.floor,
                "sphere_samples": c.sphere_samples, "avg_radius": c.avg_radius}

    @staticmethod
    def config_from_meta(meta):
        return NetConfig(l_max=int(meta["l_max"]),
                         channels=tuple(int(v) for v in meta["channels"].split(",")),
                         neighbors=int(meta["neighbors"]), n_shells=int(meta["n_shells"]),
                         M=int(meta["M"]), embed=int(meta["embed"]), weighting=meta["weighting"],
                         signal=meta["signal"], floor=float(meta["floor"]),
                         sphere_samples=int(meta["sphere_samples"]),
                         avg_radius=float(meta["avg_radius"]))

    def save(self, path, extra_meta=None):
        meta = self.config_meta()
        meta.update(extra_meta or {})
        ad.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = ad.load_checkpoint(path)
        net = cls(cls.config_from_meta(meta))
        net.load_state_dict(arrays)
        return net, meta

    # -- forward ------------------------------------------------------------
    def features(self, inp, training=False, nonlinear=True):
        """Equivariant stack up to the last level."""
        feats = {0: Tensor(inp.type0[:, None, None]), 1: Tensor(inp.type1[:, :, None])}
        for conv, nl, geo in zip(self.convs, self.nonlins, inp.geometry):
            feats = conv(feats, geo)
            if nonlinear:
                feats = nl(feats, training)
        return feats

    def embedding(self, F, X):
        return invariant_embedding(F, X, self.params["embed.W"], self.params["embed.b"])

    def head_P(self, H, training=False):
        p = self.params
        h = H
        for i in range(2):
            h = ad.matmul(h, p[f"headP.{i}.W"]) + p[f"headP.{i}.b"]
            h = ad.relu(self.head_bn[i](h, training))
        return ad.matmul(h, p["headP.2.W"]) + p["headP.2.b"]

    def head_E(self, F1):
        """Columns of each candidate are channel mixes of the pooled type-1
        block, converted from SH order back to xyz."""
        Fxyz = ad.matmul(Tensor(so3.XYZ_TO_SH.T), F1)
        return ad.einsum("ic,mck->mik", Fxyz, self.params["headE.W"])

    def forward(self, inp, training=False, nonlinear=True):
        feats = self.features(inp, training, nonlinear)
        F, winners = global_pool(feats)
        H = self.embedding(F, inp.query)
        P = self.head_P(H, training)
        E = self.head_E(F[1])
        return HeadOutputs(P, E, H, F, winners)
