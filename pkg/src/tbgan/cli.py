"""Command-line interface: ``tbgan <subcommand> [options]``.

Exit codes: 0 success, 1 I/O or other failure, 2 usage or configuration
error, 3 numeric divergence during training.
"""
import argparse
import hashlib
import json
import logging
import math
from pathlib import Path
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .arch import (GrowthState, build_discriminator, build_generator, count_parameters,
                   load_checkpoint)
from .config import apply_determinism, load_config
from .container import dump_json
from .dataset import extract_corpus, load_dataset
from .errors import (BundleIOError, ConfigError, ContractError, DivergenceError, InputError,
                     TBGANError)
from .geometry import Mesh, read_obj, similarity_align_pair, write_obj
from .headmodel import (build_head_models, complete_head, face_region_distance,
                        load_head_model, save_head_model)
from .synthesis import export_face, interpolate_identities, sample_faces, sample_latents
from .synthetic import EXPRESSION_NAMES, FaceGrid, make_head_corpus, make_synthetic_dataset
from .training import TrainState, train, write_training_checkpoint
from .verify import gradient_errors, oracle_checks
from .uvcodec import check_simplex

log = logging.getLogger("tbgan")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
RUN_RECORD = "run.json"


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_run_record(out_dir, command, argv, started, seed=None, config_hash=None, **extra):
    """``run.json``: what ran, with which seed and config, and how long it took."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    finished = time.time()
    record = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config_hash": config_hash,
        "git_describe": git_describe(),
        "version": __version__,
        "timings": {"started": started, "finished": finished,
                    "elapsed_seconds": finished - started},
    }
    record.update(extra)
    dump_json(record, out_dir / RUN_RECORD)
    return record


def parse_expression(text, n_expressions=len(EXPRESSION_NAMES)):
    """An expression name, a class index, or comma-separated label weights."""
    if text is None:
        return None
    key = text.strip().lower()
    if key in EXPRESSION_NAMES:
        index = EXPRESSION_NAMES.index(key)
    elif key.isdigit():
        index = int(key)
        if index >= n_expressions:
            raise InputError(f"expression index {index} out of range")
    else:
        try:
            vec = np.array([float(x) for x in key.split(",")])
        except ValueError:
            raise InputError(f"cannot parse expression {text!r}") from None
        if vec.shape != (n_expressions,):
            raise InputError(f"expression vector needs {n_expressions} entries")
        check_simplex(vec)
        return vec
    vec = np.zeros(n_expressions)
    vec[index] = 1.0
    return vec


def _hash_args(args, skip=("func", "out")):
    fields = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    blob = json.dumps(fields, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Subcommands


def cmd_uv_extract(args, argv):
    started = time.time()
    files = sorted(Path(args.meshes).glob("*.obj"))
    if not files:
        raise InputError(f"no .obj files in {args.meshes}")
    labels_in = json.loads(Path(args.labels).read_text()) if args.labels else {}
    meshes, colors, labels, idents = [], [], [], []
    for f in files:
        mesh, col = read_obj(f, args.topology_id, return_colors=True)
        meshes.append(mesh)
        colors.append(col)
        spec = labels_in.get(f.stem)
        if isinstance(spec, dict):
            expr, ident = spec.get("expression"), spec.get("identity", f.stem)
        else:
            expr, ident = spec, f.stem
        if isinstance(expr, str):
            expr = parse_expression(expr)
        labels.append(None if expr is None else np.asarray(expr, dtype=np.float64))
        idents.append(ident)
    bundles, *_ = extract_corpus(meshes, colors, args.resolution, labels, idents, args.out)
    print(f"wrote {len(bundles)} bundles at {args.resolution}x{args.resolution} to {args.out}")
    write_run_record(args.out, "uv-extract", argv, started, config_hash=_hash_args(args))
    return EXIT_OK


def cmd_dataset_synth(args, argv):
    started = time.time()
    grid = FaceGrid(args.grid, args.grid)
    manifest = make_synthetic_dataset(args.identities, args.per_identity, args.resolution,
                                      args.seed, args.out, grid)
    print(f"wrote {len(manifest.entries)} bundles to {args.out}")
    write_run_record(args.out, "dataset-synth", argv, started, seed=args.seed,
                     config_hash=_hash_args(args))
    return EXIT_OK


def cmd_train(args, argv):
    started = time.time()
    cfg = load_config(args.config)
    apply_determinism(cfg.mode.deterministic or args.deterministic)
    G = build_generator(cfg.arch, cfg.train.seed)
    D = build_discriminator(cfg.arch, cfg.train.seed + 1)
    if args.dry_run:
        cfg.validate(need_dataset=False)
        print(f"config hash: {cfg.hash()}")
        print(f"output resolution: {cfg.arch.output_resolution}")
        print(f"generator parameters: {count_parameters(G)}")
        print(f"discriminator parameters: {count_parameters(D)}")
        return EXIT_OK
    cfg.validate(need_dataset=True)
    if cfg.mode.float64_verify:
        G, D = G.double(), D.double()
    dataset = load_dataset(cfg.paths.dataset)
    if dataset.manifest.resolution != cfg.arch.output_resolution:
        raise ConfigError(f"dataset resolution {dataset.manifest.resolution} does not match "
                          f"the architecture's {cfg.arch.output_resolution}")
    if dataset.manifest.n_expressions != cfg.arch.n_expressions:
        raise ConfigError("dataset and architecture disagree on the number of expressions")
    data, labels = dataset.tensors(next(G.parameters()).dtype)

    state = TrainState(G, D, cfg.train)
    ckpt_dir = cfg.paths.checkpoint_dir()
    if args.resume and (ckpt_dir / "latest").exists():
        latest = ckpt_dir / (ckpt_dir / "latest").read_text().strip()
        G0, D0, _, blob = load_checkpoint(latest)
        G.load_state_dict(G0.state_dict())
        D.load_state_dict(D0.state_dict())
        state.restore(blob)
        state.last_checkpoint = str(latest)
        print(f"resumed from {latest} at step {state.step}")

    steps = args.steps
    if steps is None:
        steps = max(0, math.ceil((cfg.train.total_images - state.images_seen)
                                 / cfg.train.batch_size))
    out = Path(cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"train": cfg.train.to_dict(), "dataset": str(cfg.paths.dataset),
            "config_hash": cfg.hash()}
    last_growth = [None]

    def remember(_state, growth, _report):
        last_growth[0] = growth

    try:
        reports = train(state, data, labels, steps, out / "train_log.csv", ckpt_dir, meta,
                        on_step=remember)
    except DivergenceError as exc:
        write_run_record(out, "train", argv, started, cfg.train.seed, cfg.hash(),
                         status="diverged", step=state.step, last_checkpoint=exc.checkpoint)
        raise
    final = None
    if last_growth[0] is not None:
        final = write_training_checkpoint(state, ckpt_dir, last_growth[0], meta)
    last = reports[-1] if reports else None
    if last:
        print(f"step {state.step}: wasserstein_estimate={last.wasserstein_estimate:.6g} "
              f"g_class={last.g_class:.6g} d_class={last.d_class:.6g}")
    write_run_record(out, "train", argv, started, cfg.train.seed, cfg.hash(), status="ok",
                     steps=state.step, checkpoint=None if final is None else str(final))
    return EXIT_OK


def _generator_source(args):
    """Generator, growth state, dataset path and config hash for sampling commands."""
    if args.checkpoint:
        G, _, manifest, _ = load_checkpoint(args.checkpoint)
        growth = GrowthState(manifest["growth"]["level"], manifest["growth"]["blend"])
        train_meta = manifest.get("train") or {}
        dataset = args.dataset or train_meta.get("dataset")
        chash = train_meta.get("config_hash")
    elif args.config:
        cfg = load_config(args.config)
        G = build_generator(cfg.arch, cfg.train.seed)
        growth = GrowthState(cfg.arch.L)
        dataset = args.dataset or cfg.paths.dataset
        chash = cfg.hash()
    else:
        raise ConfigError("either --checkpoint or --config is required")
    if not dataset:
        raise ConfigError("--dataset is required to map generated maps onto a mesh")
    ds = load_dataset(dataset)
    if ds.manifest.resolution != G.config.resolution(growth.level):
        raise ConfigError("dataset resolution does not match the generator output")
    G.eval()
    return G, growth, ds, chash


def _label(args, G):
    if not G.config.n_expressions:
        return None
    return parse_expression(args.expression, G.config.n_expressions)


def cmd_sample(args, argv):
    started = time.time()
    G, growth, ds, chash = _generator_source(args)
    results = sample_faces(G, args.n, _label(args, G), args.seed, growth, ds.mask,
                           ds.manifest.topology_id)
    for i, (_, bundle) in enumerate(results):
        export_face(args.out, f"sample_{i:04d}", bundle, ds.layout, ds.template, ds.scale_factor)
    print(f"wrote {len(results)} samples to {args.out}")
    write_run_record(args.out, "sample", argv, started, args.seed, chash,
                     expression=args.expression,
                     latents=[[float(x) for x in z] for z, _ in results])
    return EXIT_OK


def cmd_interpolate(args, argv):
    started = time.time()
    G, growth, ds, chash = _generator_source(args)
    z1, z2 = sample_latents(2, G.config.latent_dim, args.seed)
    bundles = interpolate_identities(G, z1, z2, args.steps, _label(args, G), growth, ds.mask,
                                     ds.manifest.topology_id)
    for i, bundle in enumerate(bundles):
        export_face(args.out, f"interp_{i:04d}", bundle, ds.layout, ds.template, ds.scale_factor)
    print(f"wrote {len(bundles)} interpolation frames to {args.out}")
    write_run_record(args.out, "interpolate", argv, started, args.seed, chash,
                     expression=args.expression,
                     latents=[[float(x) for x in z1], [float(x) for x in z2]])
    return EXIT_OK


def cmd_complete_head(args, argv):
    started = time.time()
    if args.model:
        face_pca, head_pca, reg, template, face_idx = load_head_model(args.model)
    else:
        faces, heads, face_idx = make_head_corpus(args.corpus_size, args.seed)
        face_pca, head_pca, reg = build_head_models(faces, heads, variance_fraction=args.variance)
        template = heads[0]
        if args.save_model:
            save_head_model(args.save_model, face_pca, head_pca, reg, template, face_idx)
    face = read_obj(args.face)
    if face.vertices.size != face_pca.dim:
        raise InputError(f"face has {face.n_vertices} vertices, the face model expects "
                         f"{face_pca.dim // 3}")
    reference = Mesh(face_pca.mean.reshape(-1, 3), face.faces, face.topology_id)
    if args.no_align:
        transform, aligned = None, face
    else:
        transform, aligned = similarity_align_pair(face, reference)
    head = complete_head(aligned, face_pca, head_pca, reg, template)
    if transform is not None:
        head = head.with_vertices(transform.inverse().apply(head.vertices))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_obj(out, head)
    extra = {}
    if face_idx is not None:
        dist = face_region_distance(head, face, face_idx)
        extra["face_region_distance"] = dist
        print(f"face region distance: {dist:.6g}")
    print(f"wrote head mesh with {head.n_vertices} vertices to {out}")
    write_run_record(out.parent, "complete-head", argv, started, args.seed,
                     _hash_args(args), **extra)
    return EXIT_OK


def cmd_verify(args, argv):
    started = time.time()
    n_dirs = 16 if args.level == "quick" else 64
    errors = gradient_errors(n_dirs, args.seed)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"grad_check {name}: max relative error {err:.3e}")
    print(f"max gradient-check error: {worst:.3e}")
    ok = worst < 1e-3
    results = {"grad_check": errors}
    if args.level == "full":
        checks = oracle_checks(args.seed)
        for name, (err, tol) in checks.items():
            passed = err <= tol
            ok &= passed
            print(f"{name}: error {err:.3e} (tolerance {tol:g}) {'ok' if passed else 'FAILED'}")
        results["oracles"] = {k: {"error": e, "tolerance": t} for k, (e, t) in checks.items()}
    if args.out:
        write_run_record(args.out, "verify", argv, started, args.seed, None,
                         level=args.level, results=results, passed=bool(ok))
    print("verify: " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_DIVERGED


# ---------------------------------------------------------------------------
# Parser


def build_parser():
    parser = argparse.ArgumentParser(prog="tbgan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded deterministic kernels (also TBGAN_DETERMINISTIC=1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("uv-extract", help="align meshes and rasterize them into bundles")
    p.add_argument("--meshes", required=True, help="directory of registered .obj meshes")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--labels", help="JSON mapping mesh file stem to an expression label")
    p.add_argument("--topology-id", default="default")
    p.set_defaults(func=cmd_uv_extract)

    p = sub.add_parser("dataset-synth", help="write a procedural face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--per-identity", type=int, default=7)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=40, help="vertices per side of the face grid")
    p.set_defaults(func=cmd_dataset_synth)

    p = sub.add_parser("train", help="train the generator and critic")
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--steps", type=int, help="number of training steps (default: from config)")
    p.add_argument("--dry-run", action="store_true",
                   help="validate the config, build models and print parameter counts")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("sample", cmd_sample, "generate random faces"),
                                 ("interpolate", cmd_interpolate,
                                  "generate faces between two random identities")):
        p = sub.add_parser(name, help=helptext)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--checkpoint", help="checkpoint directory")
        src.add_argument("--config", help="config JSON (untrained generator from its seed)")
        p.add_argument("--dataset", help="dataset directory providing template and UV layout")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--expression", default="neutral",
                       help="name, class index or comma-separated 7-vector")
        if name == "sample":
            p.add_argument("--n", type=int, default=4)
        else:
            p.add_argument("--steps", type=int, default=8)
        p.set_defaults(func=func)

    p = sub.add_parser("complete-head", help="regress a full head from a face mesh")
    p.add_argument("--face", required=True, help="face .obj in the face model's topology")
    p.add_argument("--out", required=True, help="output head .obj")
    p.add_argument("--model", help="saved head model directory")
    p.add_argument("--corpus-size", type=int, default=60,
                   help="synthetic face/head pairs when no --model is given")
    p.add_argument("--variance", type=float, default=0.999)
    p.add_argument("--save-model", help="write the synthetic head model here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-align", action="store_true",
                   help="skip the similarity alignment to the face model mean")
    p.set_defaults(func=cmd_complete_head)

    p = sub.add_parser("verify", help="gradient checks and oracle suites")
    p.add_argument("--level", choices=("quick", "full"), default="quick")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for run.json")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    apply_determinism(args.deterministic)
    try:
        return args.func(args, argv)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        if exc.checkpoint:
            print(f"last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, InputError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BundleIOError, OSError, TBGANError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
