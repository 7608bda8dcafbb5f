"""Fixed-seed equivariance, lemma, gradient and loss checks.

Every check reports a measured value, a bound and the relation it must
satisfy. Output lines carry no timings so repeated runs are byte-identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import canonicalizer as cz
from . import fields, network, so3
from . import metrics as mt
from .autodiff import Tensor

GROUPS = ("sh", "cg", "lemmas", "layers", "gradcheck", "losses", "gec")


@dataclass
class Check:
    group: str
    name: str
    value: float
    bound: float
    relation: str = "<"     # "<", ">" or "=="

    @property
    def passed(self):
        v = self.value
        if not np.isfinite(v):
            return False
        if self.relation == "<":
            return v < self.bound
        if self.relation == ">":
            return v > self.bound
        return v == self.bound

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        label = f"{self.group}/{self.name}"
        return f"{status} {label:<34} {self.value:.3e} {self.relation} {self.bound:.1e}"


def _rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# -- harmonics and Wigner matrices --------------------------------------------

def check_sh(seed=0, l_max=3, trials=100):
    rng = np.random.default_rng([seed, 1])
    sh = hom = d1 = 0.0
    for _ in range(trials):
        R, R2, x = so3.random_rotation(rng), so3.random_rotation(rng), _unit(rng, 1)
        for l in range(l_max + 1):
            D = so3.wigner_d(l, R)
            lhs = so3.eval_real_sh(l, x @ R.T)[0]
            sh = max(sh, float(np.abs(lhs - D @ so3.eval_real_sh(l, x)[0]).max()))
            hom = max(hom, float(np.abs(so3.wigner_d(l, R @ R2) - D @ so3.wigner_d(l, R2)).max()))
        P = so3.XYZ_TO_SH
        d1 = max(d1, float(np.abs(so3.wigner_d(1, R) - P @ R @ P.T).max()))
    return [Check("sh", "wigner_relation", sh, 1e-9),
            Check("sh", "homomorphism", hom, 1e-8),
            Check("sh", "d1_cartesian", d1, 1e-9)]


# -- Clebsch-Gordan -----------------------------------------------------------

def check_cg(seed=0, l_max=3, trials=20):
    rng = np.random.default_rng([seed, 2])
    table = so3.CGTable(l_max)
    eq = 0.0
    for _ in range(trials):
        R = so3.random_rotation(rng)
        D = so3.wigner_blocks(l_max, R)
        for n, l, J in table.triples():
            a, b = rng.normal(size=2 * n + 1), rng.normal(size=2 * l + 1)
            lhs = so3.cg_project(table, n, l, J, D[n] @ a, D[l] @ b)
            eq = max(eq, float(np.abs(lhs - D[J] @ so3.cg_project(table, n, l, J, a, b)).max()))
    orth = 0.0
    for n in range(l_max + 1):
        for l in range(l_max + 1):
            Js = [J for J in range(abs(n - l), n + l + 1) if J <= so3.L_MAX_SUPPORTED]
            S = np.vstack([so3.cg_matrix(n, l, J) for J in Js])
            orth = max(orth, float(np.abs(S @ S.T - np.eye(S.shape[0])).max()))
    return [Check("cg", "equivariance", eq, 1e-8), Check("cg", "orthogonality", orth, 1e-9)]


# -- lemmas -------------------------------------------------------------------

def check_lemmas(seed=0, trials=5):
    rng = np.random.default_rng([seed, 3])
    quad = fields.ball_quadrature(0.1)
    avg = scal = grad = 0.0
    for _ in range(trials):
        f = fields.GaussianMixtureField.random(rng)
        R = so3.random_rotation(rng)
        fr = f.rotated(R)
        x = rng.uniform(-0.5, 0.5, size=(20, 3))
        a = fields.ball_mean(fr, x, 0.1, quad)
        avg = max(avg, float(np.abs(a - fields.ball_mean(f, x @ R, 0.1, quad)).max()))
        x = rng.uniform(-0.8, 0.8, size=(30, 3))
        lhs = fr(x)[:, None] * fr.gradient(x)
        rhs = (f(x @ R)[:, None] * f.gradient(x @ R)) @ R.T
        scal = max(scal, float(np.abs(lhs - rhs).max()))
        grad = max(grad, float(np.abs(fr.gradient(x) - f.gradient(x @ R) @ R.T).max()))
    # discrete: finite differences on a 32^3 lattice, measured in units of dx^2
    disc = 0.0
    for _ in range(trials):
        f = fields.GaussianMixtureField.random(rng, scale=(0.35, 0.5))
        f.weights = f.weights / f.weights.sum()
        R = so3.random_rotation(rng)
        g = fields.DensityGrid(np.zeros((32,) * 3), np.zeros(3), 2.0)
        X = g.coords()
        g.values = f.rotated(R)(X).reshape(g.values.shape)
        G = fields.finite_gradient(g).reshape(-1, 3)
        inner = np.all(np.abs(X) < 1 - 1.5 * g.spacing, axis=1)
        ref = f.gradient(X @ R) @ R.T
        disc = max(disc, float(np.abs(G - ref)[inner].max() / g.spacing ** 2))
    return [Check("lemmas", "local_average", avg, 1e-4),
            Check("lemmas", "density_scaling", scal, 1e-6),
            Check("lemmas", "gradient_analytic", grad, 1e-6),
            Check("lemmas", "gradient_discrete_dx2", disc, 5.0)]


# -- layers -------------------------------------------------------------------

def _layer_input(l_max, resolution, seed):
    cfg = network.NetConfig(l_max=l_max)
    _, prov = fields.synth_generate("wedge", 3)
    g = fields.resample_object_grid(prov, fields.scene_probe(prov), resolution)
    inp = network.prepare_input(g, cfg)
    net = network.FieldNet(cfg, seed=seed)
    for _ in range(2):      # move batch-norm running statistics off their defaults
        net.forward(inp, training=True)
    return cfg, net, inp


def _rot(feats, R):
    return {l: np.einsum("ij,tjc->tic", so3.wigner_d(l, R), f) for l, f in feats.items()}


def check_layers(seed=0, l_max=2, resolution=16, rotations=20):
    """Whole-network probes on a resampled wedge. The pooled features and the
    heads are measured through the linear stack so that each bound covers
    one piece; the nonlinearity has its own per-point check."""
    cfg, net, inp = _layer_input(l_max, resolution, seed)
    rng = np.random.default_rng([seed, 4])
    f0 = {0: Tensor(inp.type0[:, None, None]), 1: Tensor(inp.type1[:, :, None])}
    conv0 = net.convs[0](f0, inp.geometry[0])
    feats = {l: t.data for l, t in net.features(inp, nonlinear=True).items()}
    base = net.forward(inp, nonlinear=False)
    r = dict.fromkeys(("conv", "stack", "pool", "E", "H", "P"), 0.0)
    for _ in range(rotations):
        R = so3.random_rotation(rng)
        ri = network.build_geometry(inp.rotated(R), cfg)
        f0r = {0: Tensor(ri.type0[:, None, None]), 1: Tensor(ri.type1[:, :, None])}
        out = net.convs[0](f0r, ri.geometry[0])
        for J, v in _rot({J: t.data for J, t in conv0.items()}, R).items():
            r["conv"] = max(r["conv"], _rel(out[J].data, v))
        fr = net.features(ri, nonlinear=True)
        for J, v in _rot(feats, R).items():
            r["stack"] = max(r["stack"], _rel(fr[J].data, v))
        o = net.forward(ri, nonlinear=False)
        for J in base.F:
            r["pool"] = max(r["pool"], _rel(o.F[J].data, so3.wigner_d(J, R) @ base.F[J].data))
        r["E"] = max(r["E"], float(np.abs(o.E.data - R @ base.E.data).max()))
        r["H"] = max(r["H"], float(np.abs(o.H.data - base.H.data).max()))
        r["P"] = max(r["P"], float(np.abs(o.P.data - base.P.data).max()))
    return [Check("layers", "eqconv", r["conv"], 1e-6),
            Check("layers", "nonlinear_stack", r["stack"], 2e-4),
            Check("layers", "global_pool", r["pool"], 1e-6),
            Check("layers", "head_E", r["E"], 1e-5),
            Check("layers", "invariant_H", r["H"], 1e-5),
            Check("layers", "invariant_P", r["P"], 1e-4)]


# -- gradients ----------------------------------------------------------------

OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "scale": lambda a, b: ad.scale(a, 2.5) + b,
    "exp": lambda a, b: ad.exp(a) * b,
    "sqrt": lambda a, b: ad.sqrt(a * a + 1.0) * b,
    "relu": lambda a, b: ad.relu(a + 0.05) * b,
    "matmul": lambda a, b: ad.matmul(a, b),
    "einsum": lambda a, b: ad.einsum("ij,jk->ik", a, b),
    "transpose": lambda a, b: ad.transpose(a) * b,
    "reshape": lambda a, b: ad.reshape(a, (9,)) * ad.reshape(b, (9,)),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "take": lambda a, b: ad.take(a, np.array([0, 2, 2])) * b[:1],
    "sum": lambda a, b: ad.reduce_sum(a, axis=1) * ad.reduce_sum(b, axis=0),
    "mean": lambda a, b: ad.reduce_mean(a, axis=0) * b[0],
    "max": lambda a, b: ad.reduce_max(a + Tensor(0.3 * np.arange(9.0).reshape(3, 3)), axis=1)[0] * b[0],
    "batch_norm": lambda a, b: ad.batch_norm(a, ad.BatchNorm(3), True) * b,
    "aggregate": lambda a, b: network.aggregate_op(
        np.linspace(-1, 1, 12).reshape(2, 2, 3), np.array([[0, 1], [2, 1]]), a)
        * ad.reshape(b[:2], (2, 1, 3)),
}


def _toy_grid(n=8, seed=0):
    rng = np.random.default_rng(seed)
    g = fields.DensityGrid(np.zeros((n, n, n)), np.zeros(3), 2.0)
    f = fields.GaussianMixtureField(rng.uniform(-0.1, 0.1, size=(2, 3)),
                                    [np.diag([0.09, 0.05, 0.04])] * 2, [0.5, 0.4])
    v = fields.normalize_density(f(g.coords()) * 60)
    v[v < 0.3] = 0.0
    g.values = v.reshape(n, n, n)
    return g


def check_gradcheck(seed=0, trials=10, entries=6):
    rng = np.random.default_rng([seed, 5])
    out = []
    for name, op in OPS.items():
        worst = 0.0
        for _ in range(trials):
            a = ad.parameter(rng.uniform(-1, 1, size=(3, 3)))
            b = ad.parameter(rng.uniform(-1, 1, size=(3, 3)))
            probe = op(a, b)
            w = Tensor(np.linspace(0.5, 1.5, probe.size).reshape(probe.shape))
            worst = max(worst, ad.gradcheck(lambda a, b: ad.reduce_sum(op(a, b) * w), [a, b]).max_rel_err)
        out.append(Check("gradcheck", f"op_{name}", worst, 1e-4))
    # loss parts on their own
    X = rng.normal(size=(20, 3))
    P, E = ad.parameter(rng.normal(size=(20, 3))), ad.parameter(rng.normal(size=(4, 3, 3)))
    P2 = ad.parameter(rng.normal(size=(20, 3)))
    parts = {"loss_canon": (lambda P, E: cz.loss_canon(X, P, ad.take(E, 1)), [P, E]),
             "loss_ortho": (lambda E: cz.loss_ortho(E), [E]),
             "loss_siamese": (lambda A, B: cz.loss_siamese(A, B), [P, P2])}
    for name, (f, ts) in parts.items():
        out.append(Check("gradcheck", name, ad.gradcheck(f, ts).max_rel_err, 1e-4))
    # the full training loss over a pair of toy fields, every parameter tensor
    cfg = network.NetConfig(l_max=1, channels=(2, 2, 2), M=2, embed=4, neighbors=16)
    net = network.FieldNet(cfg, seed=seed)
    grids = [_toy_grid(seed=0), _toy_grid(seed=1)]
    tc = cz.TrainingConfig(seed=seed)
    names = sorted(net.params)

    def loss(*_):
        return cz.total_loss(cz.pair_losses(net, grids, tc), tc)

    # ReLU on the sphere samples puts kinks within ~1e-6 of typical weights;
    # a 1e-7 step keeps the central difference on one smooth piece
    rep = ad.gradcheck(loss, [net.params[n] for n in names], step=1e-7,
                       max_entries=entries, seed=seed)
    out.append(Check("gradcheck", "full_loss_graph", rep.max_rel_err, 1e-4))
    return out


# -- loss identities ----------------------------------------------------------

def _loop_chamfer(A, B):
    def one_way(P, Q):
        best = []
        for p in P:
            m = np.inf
            for q in Q:
                m = min(m, (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2)
            best.append(m)
        return np.mean(best)
    return one_way(A, B) + one_way(B, A)


def check_losses(seed=0, trials=20, eps=1e-3):
    rng = np.random.default_rng([seed, 6])
    canon = ortho0 = siam = 0.0
    ortho_eps = np.inf
    for _ in range(trials):
        R = so3.random_rotation(rng)
        P = rng.normal(size=(50, 3))
        canon = max(canon, cz.loss_canon(P @ R.T, Tensor(P), Tensor(R)).item())
        ortho0 = max(ortho0, cz.loss_ortho(Tensor(R[None])).item())
        S = rng.normal(size=(3, 3))
        S = (S + S.T) / np.linalg.norm(S + S.T)
        ortho_eps = min(ortho_eps, cz.loss_ortho(Tensor((R @ (np.eye(3) + eps * S))[None])).item())
        A, B = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        siam = max(siam, abs(cz.loss_siamese(Tensor(A), Tensor(B)).item() - _loop_chamfer(A, B)))
    return [Check("losses", "canon_exact_zero", canon, 1e-24),
            Check("losses", "ortho_rotation_zero", ortho0, 1e-12),
            Check("losses", "ortho_eps_over_half_eps", ortho_eps / (eps / 2), 1.0, ">"),
            Check("losses", "siamese_vs_oracle", siam, 0.0, "==")]


# -- GEC degeneracy -----------------------------------------------------------

def check_gec(seed=0, T=3):
    insts = [mt.eval_instance("wedge", s, n_points=128) for s in range(5)]
    ident = 100 * mt.gec(mt.IdentityCanonicalizer(), insts, T=T, seed=seed)
    oracle = mt.gec(mt.OracleCanonicalizer(), insts, T=T, seed=seed)
    return [Check("gec", "identity_x100", ident, 1.0, ">"),
            Check("gec", "oracle", oracle, 1e-12)]


RUNNERS = {
    "sh": lambda o: check_sh(o["seed"]),
    "cg": lambda o: check_cg(o["seed"]),
    "lemmas": lambda o: check_lemmas(o["seed"]),
    "layers": lambda o: check_layers(o["seed"], o["l_max"], o["resolution"], o["rotations"]),
    "gradcheck": lambda o: check_gradcheck(o["seed"]),
    "losses": lambda o: check_losses(o["seed"]),
    "gec": lambda o: check_gec(o["seed"]),
}


def run(groups=GROUPS, seed=0, l_max=2, resolution=16, rotations=20, on_check=None):
    """Run the requested groups in a fixed order; returns the list of checks."""
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown verify groups: {sorted(unknown)}")
    opts = {"seed": seed, "l_max": l_max, "resolution": resolution, "rotations": rotations}
    checks = []
    for g in GROUPS:
        if g not in groups:
            continue
        with np.errstate(all="ignore"):
            got = RUNNERS[g](opts)
        for c in got:
            checks.append(c)
            if on_check is not None:
                on_check(c)
    return checks


def summary(checks):
    failed = [c for c in checks if not c.passed]
    if not failed:
        return f"verify: all {len(checks)} checks passed"
    return f"verify: {len(failed)} of {len(checks)} checks failed: " + \
        ", ".join(f"{c.group}/{c.name}" for c in failed)
