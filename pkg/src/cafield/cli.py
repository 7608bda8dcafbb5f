"""Command-line entry point: gen, train, canonicalize, eval, verify, inspect.

Every setting is a config key. Values come from the command line, then from
a flat ``key = value`` file given with ``--config``, then from the defaults
below. Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric, 4 verify
failure.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import dataclass

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")

PUBLISHED = "published setting"
PACKAGE = "package choice"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    type: object
    default: object
    help: str
    provenance: str = PACKAGE
    choices: tuple = None

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    vals = tuple(int(v) for v in str(text).split(","))
    if not vals:
        raise ValueError("empty list")
    return vals


def _names(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


K = {k.name: k for k in [
    Key("seed", int, 0, "master seed for every random choice"),
    Key("out", str, "run", "output run directory"),
    Key("data", str, "data", "dataset directory holding manifest.txt"),
    Key("categories", _names, ("wedge",), "comma-separated synthetic categories"),
    Key("count", int, 8, "instances per category"),
    Key("scene_resolution", int, 64, "lattice size of stored scene grids"),
    Key("clutter", float, 0.0, "clutter level added around each object"),
    Key("noise", float, 0.0, "smooth additive density noise (fraction of peak)"),
    Key("depth_step", float, 2.0 / 64, "depth step d in 1 - exp(-d sigma)"),
    Key("source", str, "grid", "training input: stored scene grids or analytic fields",
        choices=("grid", "synthetic")),
    Key("epochs", int, 300, "training epochs", PUBLISHED),
    Key("batch_size", int, 2, "instances per step (one siamese pair)", PUBLISHED),
    Key("lr", float, 6e-4, "Adam learning rate", PUBLISHED),
    Key("weight_decay", float, 1e-5, "decoupled weight decay", PUBLISHED),
    Key("w_canon", float, 2.0, "weight of the canonical reconstruction loss", PUBLISHED),
    Key("w_ortho", float, 1.0, "weight of the orthonormality loss", PUBLISHED),
    Key("w_siamese", float, 1.0, "weight of the siamese Chamfer loss", PUBLISHED),
    Key("siamese", _bool, True, "train with the cross-instance consistency loss", PUBLISHED),
    Key("resolution", int, 32, "object grid lattice size", PUBLISHED),
    Key("lmax", int, 3, "maximum feature degree", PUBLISHED),
    Key("M", int, 4, "number of candidate transforms", PUBLISHED),
    Key("channels", _ints, (8, 16, 32), "channels of the three convolution blocks"),
    Key("neighbors", int, 512, "neighbors per convolution target"),
    Key("embed", int, 128, "invariant embedding width", PUBLISHED),
    Key("signal", str, "gradient", "input type-1 signal", PUBLISHED, ("gradient", "xyz")),
    Key("weighting", str, "direct", "density weighting at the first aggregation", PUBLISHED,
        ("direct", "local-average")),
    Key("checkpoint_every", int, 0, "also save a checkpoint every N epochs (0: only final)"),
    Key("checkpoint", str, "run/model", "model checkpoint directory"),
    Key("canonicalizer", _names, ("model", "pca", "identity", "oracle"),
        "comma-separated canonicalizers to evaluate"),
    Key("T", int, 10, "rotation pairs per instance", PUBLISHED),
    Key("n_points", int, 512, "template surface points per instance"),
    Key("rotations", int, 20, "random rotations per layer check"),
    Key("groups", _names, ("all",), "verify groups: sh,cg,lemmas,layers,gradcheck,losses,gec"),
    Key("inject_fault", str, "", "mutation hook for the suite itself", choices=("", "wigner-sign")),
]}

NET_KEYS = ["lmax", "M", "channels", "neighbors", "embed", "signal", "weighting"]
TRAIN_KEYS = ["epochs", "batch_size", "lr", "weight_decay", "w_canon", "w_ortho", "w_siamese",
              "siamese", "resolution", "checkpoint_every", "depth_step"]

COMMANDS = {
    "gen": ("write synthetic scene grids and a manifest",
            ["seed", "out", "categories", "count", "scene_resolution", "clutter", "noise",
             "depth_step"]),
    "train": ("train the canonicalization network on a dataset",
              ["seed", "out", "data", "source"] + TRAIN_KEYS + NET_KEYS),
    "canonicalize": ("canonicalize every instance of a dataset (or given grid files)",
                     ["seed", "out", "data", "source", "checkpoint", "resolution", "depth_step"]),
    "eval": ("IC / CC / GEC report for the requested canonicalizers",
             ["seed", "out", "data", "categories", "count", "clutter", "noise", "checkpoint",
              "canonicalizer", "T", "n_points", "resolution", "depth_step"]),
    "verify": ("fixed-seed equivariance, lemma, gradient and loss checks",
               ["seed", "out", "lmax", "resolution", "rotations", "groups", "inject_fault"]),
    "inspect": ("print the header of a grid file, checkpoint or dataset", []),
}

# per-command defaults that differ from the shared table
OVERRIDES = {
    "gen": {"out": "data"},
    "verify": {"lmax": 2, "resolution": 16, "out": ""},
}


def default_for(cmd, name):
    return OVERRIDES.get(cmd, {}).get(name, K[name].default)


def _show(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "on" if v else "off"
    return repr(v) if v == "" else str(v)


# -- parsing ------------------------------------------------------------------

class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = Parser(prog="cafield", description=__doc__,
               formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    for cmd, (desc, keys) in COMMANDS.items():
        sp = sub.add_parser(cmd, help=desc, description=desc)
        if cmd == "inspect":
            sp.add_argument("path", help="grid file, checkpoint directory or dataset directory")
            continue
        sp.add_argument("--config", help="flat key = value file (CLI > file > default)")
        for name in keys:
            k = K[name]
            text = f"{k.help} (default: {_show(default_for(cmd, name))}; {k.provenance})"
            if k.type is _bool:
                sp.add_argument(k.flag, dest=name, action=argparse.BooleanOptionalAction,
                                default=None, help=text)
            else:
                flags = [k.flag]
                if name == "categories":
                    flags.append("--category")
                sp.add_argument(*flags, dest=name, default=None, metavar=name.upper(), help=text)
        if cmd == "canonicalize":
            sp.add_argument("inputs", nargs="*", help="scene grid files (default: the dataset)")
    return p


def read_config_file(path, allowed):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e.strerror}")
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = val
    return out


def _convert(k, raw):
    try:
        val = k.type(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad value for {k.name}: {raw!r} ({e})")
    if k.choices is not None and val not in k.choices:
        raise UsageError(f"{k.name} must be one of {', '.join(repr(c) for c in k.choices)}")
    return val


def resolve(cmd, args):
    """Merge CLI > config file > default into a plain dict."""
    keys = COMMANDS[cmd][1]
    file_vals = read_config_file(args.config, set(keys)) if getattr(args, "config", None) else {}
    cfg = {}
    for name in keys:
        cli = getattr(args, name, None)
        if cli is not None:
            cfg[name] = cli if isinstance(cli, bool) else _convert(K[name], cli)
        elif name in file_vals:
            cfg[name] = _convert(K[name], file_vals[name])
        else:
            cfg[name] = default_for(cmd, name)
    return cfg


def apply_threads(environ=os.environ):
    """Map CAFIELD_THREADS onto the BLAS / OpenMP thread variables."""
    raw = environ.get("CAFIELD_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"CAFIELD_THREADS must be a positive integer, got {raw!r}")
    for var in THREAD_VARS:
        environ[var] = str(n)
    return n


# -- artifacts ----------------------------------------------------------------

def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_artifacts(out, paths, name="artifacts.txt"):
    """``relative-path size sha256`` per produced file, sorted by path."""
    rows = []
    for p in sorted(set(paths)):
        rel = os.path.relpath(p, out)
        rows.append(f"{rel} {os.path.getsize(p)} {sha256(p)}")
    with open(os.path.join(out, name), "w") as fh:
        fh.write("\n".join(rows) + ("\n" if rows else ""))


def _files_under(path):
    if os.path.isfile(path):
        return [path]
    found = []
    for root, _, files in os.walk(path):
        found += [os.path.join(root, f) for f in files]
    return found


def _mkdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {path}: {e.strerror}")


# -- commands -----------------------------------------------------------------

def instance_seeds(seed, category_index, count):
    import numpy as np
    ss = np.random.SeedSequence([seed, category_index])
    return [int(s) for s in ss.generate_state(count, dtype=np.uint32)] if count else []


def cmd_gen(cfg):
    from . import fields
    if cfg["count"] < 0:
        raise UsageError("count must be >= 0")
    for c in cfg["categories"]:
        if c not in fields.CATALOG:
            raise UsageError(f"unknown category {c!r}; known: {', '.join(sorted(fields.CATALOG))}")
    out = cfg["out"]
    _mkdir(out)
    entries, produced = [], []
    for ci, cat in enumerate(cfg["categories"]):
        for s in instance_seeds(cfg["seed"], ci, cfg["count"]):
            inst, prov = fields.synth_generate(cat, s, cfg["clutter"], cfg["noise"])
            grid = fields.sample_grid(prov, (0.0, 0.0, 0.0), 2.0, cfg["scene_resolution"],
                                      cfg["depth_step"])
            name = f"{cat}-{s}.cafg"
            path = os.path.join(out, name)
            fields.grid_write(path, grid)
            fields.grid_read(path)      # re-validate what was written
            entries.append(fields.ManifestEntry(cat, s, name, inst.R_gt))
            produced.append(path)
            print(f"gen {name}")
    params = {"seed": cfg["seed"], "clutter": cfg["clutter"], "noise": cfg["noise"],
              "resolution": cfg["scene_resolution"], "depth_step": repr(cfg["depth_step"])}
    man = os.path.join(out, "manifest.txt")
    fields.DatasetManifest(entries, params).write(man)
    write_artifacts(out, produced + [man])
    print(f"gen: {len(entries)} instances in {out}")
    return EXIT_OK


def _net_config(cfg):
    from .network import NetConfig
    nc = NetConfig(l_max=cfg["lmax"], channels=tuple(cfg["channels"]), neighbors=cfg["neighbors"],
                   M=cfg["M"], embed=cfg["embed"], weighting=cfg["weighting"], signal=cfg["signal"])
    try:
        return nc.validate()
    except ValueError as e:
        raise UsageError(str(e))


def _manifest(data):
    from . import fields
    path = os.path.join(data, "manifest.txt")
    if not os.path.exists(path):
        raise DataError(f"no manifest at {path}")
    return fields.DatasetManifest.read(path)


def _depth(cfg, manifest):
    # stored grids remember the depth step they were normalized with
    return float(manifest.params.get("depth_step", cfg["depth_step"]))


def cmd_train(cfg):
    from . import autodiff as ad
    from . import canonicalizer as cz
    nc = _net_config(cfg)
    tc = cz.TrainingConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                           weight_decay=cfg["weight_decay"], w_canon=cfg["w_canon"],
                           w_ortho=cfg["w_ortho"], w_siamese=cfg["w_siamese"], seed=cfg["seed"],
                           siamese=cfg["siamese"], resolution=cfg["resolution"],
                           checkpoint_every=cfg["checkpoint_every"])
    try:
        tc.validate()
    except ValueError as e:
        raise UsageError(str(e))
    man = _manifest(cfg["data"])
    d = _depth(cfg, man)
    tc.depth_step = d
    items = cz.make_items(man, cfg["source"], d)
    out = cfg["out"]
    _mkdir(out)
    tc.checkpoint_dir = os.path.join(out, "checkpoints") if tc.checkpoint_every else ""
    log_path = os.path.join(out, "train.log")
    with open(log_path, "w") as log:
        for line in cz.log_header(tc, nc) + [f"# data={cfg['data']} source={cfg['source']}"]:
            log.write(line + "\n")
            print(line)

        def on_epoch(rec):
            log.write(rec.line() + "\n")
            log.flush()
            print(rec.line(), flush=True)

        try:
            net, records = cz.train(items, tc, nc, on_epoch=on_epoch)
        except ad.UsageError as e:
            raise UsageError(str(e))
    model = os.path.join(out, "model")
    net.save(model, {"epochs": tc.epochs, "seed": tc.seed, "siamese": int(tc.siamese),
                     "final_loss": repr(records[-1].total)})
    produced = [log_path] + _files_under(model)
    if tc.checkpoint_dir:
        produced += _files_under(tc.checkpoint_dir)
    write_artifacts(out, produced)
    return EXIT_OK


def _load_net(path):
    from .network import FieldNet
    if not os.path.exists(os.path.join(path, "manifest.txt")):
        raise DataError(f"no checkpoint at {path}")
    try:
        net, _ = FieldNet.load(path)
    except (ValueError, KeyError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}")
    return net


def cmd_canonicalize(cfg, inputs=()):
    from . import canonicalizer as cz
    from . import fields, so3
    net = _load_net(cfg["checkpoint"])
    if inputs:
        jobs = [(os.path.basename(p), "file", p) for p in inputs]
        d = cfg["depth_step"]
    else:
        man = _manifest(cfg["data"])
        d = _depth(cfg, man)
        jobs = [(os.path.splitext(e.path)[0], "entry", (man, e)) for e in man.entries]
    out = cfg["out"]
    _mkdir(out)
    lines = ["# name r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz scale index residual"]
    failed = 0
    for name, kind, job in jobs:
        try:
            if kind == "file":
                source = fields.grid_read(job)
            else:
                man, e = job
                source = man.provider(e, cfg["source"], d)
            res = cz.canonicalize(source, net, cfg["resolution"], d, cfg["seed"])
            so3.check_rotation(res.rotation)
            lines.append(res.record(name))
        except (fields.DegenerateError, fields.FormatError, so3.RotationError, OSError) as e:
            failed += 1
            msg = getattr(e, "strerror", None) or str(e)
            lines.append(f"{name} FAILED {type(e).__name__}: {msg}")
            print(f"canonicalize: {name} failed: {msg}", file=sys.stderr)
    path = os.path.join(out, "canonical.txt")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    write_artifacts(out, [path])
    print(f"canonicalize: {len(jobs) - failed} ok, {failed} failed -> {path}")
    return EXIT_DATA if failed else EXIT_OK


def _eval_instances(cfg):
    from . import metrics as mt
    if cfg["data"]:
        man = _manifest(cfg["data"])
        clutter = float(man.params.get("clutter", 0.0))
        noise = float(man.params.get("noise", 0.0))
        pairs = [(e.category, e.seed) for e in man.entries]
    else:
        clutter, noise = cfg["clutter"], cfg["noise"]
        pairs = [(c, s) for ci, c in enumerate(cfg["categories"])
                 for s in instance_seeds(cfg["seed"], ci, cfg["count"])]
    return [mt.eval_instance(c, s, clutter, noise, cfg["n_points"]) for c, s in pairs]


def cmd_eval(cfg):
    from . import metrics as mt
    known = {"model", "pca", "identity", "oracle"}
    bad = [c for c in cfg["canonicalizer"] if c not in known]
    if bad or not cfg["canonicalizer"]:
        raise UsageError(f"canonicalizer must be a list from {sorted(known)}")
    if cfg["T"] < 1:
        raise UsageError("T must be >= 1")
    insts = _eval_instances(cfg)
    if not insts:
        raise DataError("no instances to evaluate")
    canons, meta = [], {"seed": cfg["seed"], "T": cfg["T"], "n_points": cfg["n_points"],
                        "instances": len(insts)}
    for c in cfg["canonicalizer"]:
        if c == "model":
            net = _load_net(cfg["checkpoint"])
            canons.append(mt.ModelCanonicalizer(net, cfg["resolution"], cfg["depth_step"]))
            meta["checkpoint"] = cfg["checkpoint"]
            meta["model_config"] = {k: str(v) for k, v in sorted(net.config_meta().items())}
        else:
            canons.append({"pca": mt.PCACanonicalizer, "identity": mt.IdentityCanonicalizer,
                           "oracle": mt.OracleCanonicalizer}[c]())
    try:
        report = mt.evaluate_suite(canons, insts, T=cfg["T"], seed=cfg["seed"], meta=meta)
    except mt.DegenerateGeometryError as e:
        raise DataError(str(e))
    out = cfg["out"]
    _mkdir(out)
    path = os.path.join(out, "report.json")
    with open(path, "w") as fh:
        fh.write(report.to_json() + "\n")
    table = os.path.join(out, "report.txt")
    with open(table, "w") as fh:
        fh.write(report.table() + "\n")
    write_artifacts(out, [path, table])
    print(report.table())
    return EXIT_OK


def cmd_verify(cfg):
    from . import so3, verify
    groups = verify.GROUPS if cfg["groups"] == ("all",) else cfg["groups"]
    if set(groups) - set(verify.GROUPS):
        raise UsageError(f"groups must come from {', '.join(verify.GROUPS)}")
    if not 1 <= cfg["lmax"] <= so3.L_MAX_SUPPORTED:
        raise UsageError(f"lmax must be in 1..{so3.L_MAX_SUPPORTED}")
    lines = [f"# verify seed={cfg['seed']} lmax={cfg['lmax']} resolution={cfg['resolution']} "
             f"rotations={cfg['rotations']} fault={cfg['inject_fault'] or 'none'}"]
    print(lines[0], flush=True)

    def show(c):
        lines.append(c.line())
        print(c.line(), flush=True)

    if cfg["inject_fault"] == "wigner-sign":
        so3.inject_fault("wigner_sign")
    try:
        checks = verify.run(groups, cfg["seed"], cfg["lmax"], cfg["resolution"],
                            cfg["rotations"], on_check=show)
    finally:
        so3.clear_faults()
    lines.append(verify.summary(checks))
    print(lines[-1])
    if cfg["out"]:
        _mkdir(cfg["out"])
        path = os.path.join(cfg["out"], "verify.txt")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        write_artifacts(cfg["out"], [path])
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


def cmd_inspect(path):
    from . import autodiff as ad
    from . import fields
    if os.path.isdir(path):
        man = os.path.join(path, "manifest.txt")
        if not os.path.exists(man):
            raise DataError(f"{path}: no manifest.txt")
        with open(man) as fh:
            first = fh.readline()
        if first.startswith(f"# {fields.DATASET_VERSION}"):
            m = fields.DatasetManifest.read(man)
            print(f"dataset {path}: {len(m.entries)} instances")
            for k, v in sorted(m.params.items()):
                print(f"  {k} = {v}")
            cats = {}
            for e in m.entries:
                cats[e.category] = cats.get(e.category, 0) + 1
            for c, n in sorted(cats.items()):
                print(f"  category {c}: {n}")
            return EXIT_OK
        try:
            arrays, meta = ad.load_checkpoint(path)
        except (ValueError, KeyError) as e:
            raise DataError(f"{path}: {e}")
        print(f"checkpoint {path}: {len(arrays)} tensors, "
              f"{sum(a.size for a in arrays.values())} values")
        for k, v in sorted(meta.items()):
            print(f"  meta {k} = {v}")
        for k in sorted(arrays):
            print(f"  {k} {'x'.join(map(str, arrays[k].shape)) or 'scalar'}")
        return EXIT_OK
    g = fields.grid_read(path)
    v = g.values
    print(f"grid {path}: {'x'.join(map(str, v.shape))} center {tuple(float(c) for c in g.center)} "
          f"side {g.side:g}")
    print(f"  density min {v.min():.6g} max {v.max():.6g} mean {v.mean():.6g} "
          f"nonzero {int((v > 0).sum())}")
    return EXIT_OK


# -- main ---------------------------------------------------------------------

def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise UsageError("cafield: a command is required")
    apply_threads()
    if args.command == "inspect":
        return cmd_inspect(args.path)
    cfg = resolve(args.command, args)
    if args.command == "canonicalize":
        return cmd_canonicalize(cfg, args.inputs)
    return {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "verify": cmd_verify}[args.command](cfg)


def main(argv=None):
    try:
        return run(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:      # includes the training NumericError
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as e:
        # format errors, degenerate data and unreadable files
        msg = getattr(e, "strerror", None) or str(e)
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
