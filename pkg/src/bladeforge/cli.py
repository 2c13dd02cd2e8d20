"""``forge`` command line.

Exit codes: 0 success, 2 invalid input or configuration, 3 a stage failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import condmap, latent, metrics
from ._accel import configure_threads
from .blades import generate_dataset
from .config import RunConfig, SdfConfig, env_seed, tiny_config
from .decoder import LatentTable, TrainConfig, infer_latent, load_checkpoint, train
from .errors import ConfigError, ForgeError, StageError
from .io import read_cloud, read_obj, write_latents
from .meshing import TriangleMesh, extract_mesh
from .pipeline import label_dataset, load_samples, mesh_report, run_pipeline

log = logging.getLogger("bladeforge")

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3


class _Invalid(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise _Invalid(f"expected comma-separated numbers, got {text!r}") from e


def _train_cfg(args) -> TrainConfig:
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        if "train" in raw:  # a full run config
            return RunConfig.from_dict(raw).train_config()
        return TrainConfig.from_dict(raw).validate()
    return TrainConfig(seed=env_seed(0))


def _sample_ids(sdf_dir: Path, split: str | None = None) -> list[str]:
    ids = sorted(p.name[:-4] for p in sdf_dir.glob("*.bin"))
    if split and (sdf_dir.parent / "dataset" / "manifest.json").exists():
        m = json.loads((sdf_dir.parent / "dataset" / "manifest.json").read_text())
        keep = {d["design_id"] for d in m["designs"] if d["split"] == split}
        ids = [i for i in ids if i in keep]
    return ids


def _load_code(args, default_table=None) -> tuple[str, np.ndarray]:
    table = LatentTable.load(args.latents) if args.latents else default_table
    if table is None:
        raise _Invalid("no latent table: pass --latents or use a checkpoint that stores one")
    if args.latent_id not in table.design_ids:
        raise _Invalid(f"latent id {args.latent_id!r} not in table")
    return args.latent_id, table.code(args.latent_id)


def _save_mesh(mesh: TriangleMesh, out) -> dict:
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    mesh.save(out)
    return mesh_report(mesh)


def _mesh_kw(args) -> dict:
    return {"res": args.res, "lo": -args.bound, "hi": args.bound,
            "max_aspect": None if args.max_aspect <= 0 else args.max_aspect}


# -- subcommands ----------------------------------------------------------

def cmd_gen_dataset(args):
    seed = env_seed(args.seed)
    m = generate_dataset(args.out, args.n_train, args.n_test, seed, args.n_surface, args.n_interior)
    print(f"wrote {len(m['designs'])} designs to {args.out}")


def cmd_label(args):
    cfg = SdfConfig(args.delta, args.n, args.band_fraction, args.tol_sign, args.tol_surf)
    if cfg.delta <= 0 or cfg.n_samples <= 0 or not 0 <= cfg.band_fraction <= 1:
        raise _Invalid("need delta > 0, n > 0 and band fraction in [0, 1]")
    ids = label_dataset(args.in_dir, args.out, cfg, env_seed(args.seed))
    print(f"labelled {len(ids)} designs into {args.out}")


def cmd_train(args):
    cfg = _train_cfg(args)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    sdf_dir = Path(args.samples)
    ids = _sample_ids(sdf_dir, "train")
    if not ids:
        raise _Invalid(f"no sample sets in {sdf_dir}")
    res = train(load_samples(sdf_dir, ids), cfg, checkpoint_dir=args.out,
                progress=lambda e, loss: log.info("epoch %d loss %.6f", e, loss))
    print(f"trained {len(ids)} designs for {cfg.epochs} epochs; final loss "
          f"{res.loss_curve[-1] if res.loss_curve else float('nan'):.6f}; checkpoint {args.out}")


def cmd_infer_latent(args):
    model, _, cfg, _ = load_checkpoint(args.checkpoint)
    if args.steps is not None:
        cfg.infer_steps = args.steps
    path = Path(args.samples)
    ids = [path.name[:-4]] if path.is_file() else _sample_ids(path, None if args.all else "test")
    sdf_dir = path.parent if path.is_file() else path
    codes = [infer_latent(model, s, cfg, seed=env_seed(0)) for s in load_samples(sdf_dir, ids)]
    write_latents(args.out, ids, np.asarray(codes).reshape(len(ids), model.latent_dim))
    print(f"inferred {len(ids)} codes -> {args.out}")


def cmd_extract(args):
    model, table, _, _ = load_checkpoint(args.checkpoint)
    _, z = _load_code(args, table)
    print(json.dumps(_save_mesh(extract_mesh(model, z, **_mesh_kw(args)), args.out)))


def cmd_eval_dist(args):
    ref = read_cloud(args.ref)
    v, t = read_obj(args.mesh)
    rep = metrics.distance_report(args.design_id or Path(args.ref).stem, ref, TriangleMesh(v, t),
                                  n_pred_samples=args.n_pred_samples, exact=args.exact)
    if args.out:
        metrics.write_distance_csv(args.out, [rep])
    print(json.dumps({"design_id": rep.design_id, "distance": rep.mean_directed_distance,
                      "relative": rep.relative, "n_ref": rep.n_ref}))


def cmd_eval_nrmse(args):
    per_dim, mean = metrics.nrmse_per_dim(LatentTable.load(args.truth), LatentTable.load(args.pred), args.norm)
    if args.out:
        np.savetxt(args.out, per_dim, header="nrmse_percent", comments="")
    print(json.dumps({"mean_nrmse_percent": mean, "n_dims": len(per_dim)}))


def cmd_pca(args):
    table = LatentTable.load(args.latents)
    basis = latent.fit_pca(table.codes, args.components)
    basis.save(args.out)
    print(json.dumps({"explained_ratio": basis.explained_ratio[:10].tolist(), "out": args.out}))


def cmd_traverse(args):
    model, *_ = load_checkpoint(args.checkpoint)
    basis = latent.PcaBasis.load(args.basis)
    coords = _floats(args.coords)
    out = Path(args.out)
    rows = []
    for k, z in enumerate(latent.traverse(basis, args.axis, coords)):
        rep = _save_mesh(extract_mesh(model, z, **_mesh_kw(args)), out / f"pc{args.axis}_{k:02d}.obj")
        rows.append({"coord": coords[k], **rep})
    print(json.dumps(rows))


def cmd_interp(args):
    model, ckpt_table, *_ = load_checkpoint(args.checkpoint)
    table = LatentTable.load(args.latents) if args.latents else ckpt_table
    if table is None:
        raise _Invalid("no latent table")
    anchors = args.anchors.split(",")
    missing = [a for a in anchors if a not in table.design_ids]
    if missing or len(anchors) < 2:
        raise _Invalid(f"need at least two known anchor ids (missing: {missing})")
    zs = np.stack([table.code(a) for a in anchors])
    if len(anchors) == 2:
        codes = latent.interpolate(zs[0], zs[1], np.linspace(0, 1, args.steps))
    else:
        if not args.weights:
            raise _Invalid("multi-anchor blends need --weights")
        codes = np.atleast_2d(latent.blend(zs, _floats(args.weights)))
    out = Path(args.out)
    print(json.dumps([_save_mesh(extract_mesh(model, z, **_mesh_kw(args)), out / f"interp_{k:02d}.obj")
                      for k, z in enumerate(codes)]))


def cmd_sample(args):
    model, ckpt_table, *_ = load_checkpoint(args.checkpoint)
    table = LatentTable.load(args.latents) if args.latents else ckpt_table
    if table is None or len(table) < 2:
        raise _Invalid("need a latent table with at least two codes")
    g = latent.DiagonalGaussian.fit(table.codes, args.temperature)
    codes = latent.sample_codes(g, args.n, seed=env_seed(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_latents(out / "samples.csv", [f"sample_{k:03d}" for k in range(len(codes))], codes)
    print(json.dumps([_save_mesh(extract_mesh(model, z, **_mesh_kw(args)), out / f"sample_{k:03d}.obj")
                      for k, z in enumerate(codes)]))


def cmd_train_cmap(args):
    ids, eps = condmap.read_strains(args.strains)
    table = LatentTable.load(args.latents)
    keep = [i for i, d in enumerate(ids) if d in table.design_ids]
    if not keep:
        raise _Invalid("no strain rows match latent ids")
    cfg = condmap.CondConfig(epochs=args.epochs, lr=args.lr, seed=env_seed(args.seed))
    model, curve = condmap.train_cond(eps[keep], np.stack([table.code(ids[i]) for i in keep]), cfg)
    model.save(args.out)
    print(json.dumps({"pairs": len(keep), "final_nrmse_percent": curve[-1] if curve else None, "out": args.out}))


def cmd_gen_cond(args):
    cm = condmap.CondModel.load(args.cmap)
    model, *_ = load_checkpoint(args.checkpoint)
    eps = _floats(args.eps)
    if len(eps) != 3:
        raise _Invalid("--eps takes three values: eps_x,eps_y,eps_z")
    try:
        mesh, _ = condmap.conditional_generate(cm, model, np.array(eps), args.res, lo=-args.bound, hi=args.bound,
                                               max_aspect=None if args.max_aspect <= 0 else args.max_aspect)
    except ValueError as e:
        raise StageError("gen-cond", str(e)) from e
    print(json.dumps(_save_mesh(mesh, args.out)))


def cmd_run(args):
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = tiny_config() if args.tiny else RunConfig()
    cfg.seed = env_seed(cfg.seed)
    cfg.validate()
    stages = args.stages.split(",") if args.stages else None
    out = run_pipeline(cfg, args.root, stages, args.force, progress=print)
    print(f"experiment directory: {out}")


def cmd_init_config(args):
    cfg = tiny_config() if args.tiny else RunConfig()
    cfg.save(args.out)
    print(f"wrote {args.out} (hash {cfg.hash()})")


# -- parser ---------------------------------------------------------------

def _add_mesh_args(p, res=128):
    p.add_argument("--res", type=int, default=res)
    p.add_argument("--bound", type=float, default=1.1, help="half-width of the sampling cube")
    p.add_argument("--max-aspect", type=float, default=20.0, help="sliver cleanup target; 0 disables")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="forge", description="Implicit blade generation pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="synthesize blade point clouds")
    p.add_argument("--n-train", type=int, default=222)
    p.add_argument("--n-test", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-surface", type=int, default=10000)
    p.add_argument("--n-interior", type=int, default=5000)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_dataset)

    p = sub.add_parser("label", help="clouds -> truncated SDF samples")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--band-fraction", type=float, default=0.5)
    p.add_argument("--tol-sign", type=float, default=0.0)
    p.add_argument("--tol-surf", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("train", help="auto-decoder training")
    p.add_argument("--samples", required=True, help="directory of .bin sample sets")
    p.add_argument("--config", help="TrainConfig or run-config JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer-latent", help="fit codes with the decoder frozen")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True, help="a .bin file or a directory")
    p.add_argument("--all", action="store_true", help="every design in the directory, not only test")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer_latent)

    p = sub.add_parser("extract", help="decode one latent to a mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--latents", help="latent CSV (default: the checkpoint's training codes)")
    p.add_argument("--latent-id", required=True)
    _add_mesh_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("eval-dist", help="directed surface distance")
    p.add_argument("--ref", required=True, help="reference cloud (PLY or CSV)")
    p.add_argument("--mesh", required=True)
    p.add_argument("--design-id")
    p.add_argument("--n-pred-samples", type=int, default=metrics.N_PRED_SAMPLES)
    p.add_argument("--exact", action="store_true", help="exact point-triangle distances")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval_dist)

    p = sub.add_parser("eval-nrmse", help="per-dimension NRMSE between latent tables")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--norm", choices=("range", "std"), default="range")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval_nrmse)

    p = sub.add_parser("pca", help="principal axes of a latent table")
    p.add_argument("--latents", required=True)
    p.add_argument("--components", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pca)

    p = sub.add_parser("traverse", help="decode along a principal axis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("--coords", default="-0.05,0,0.05")
    _add_mesh_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_traverse)

    p = sub.add_parser("interp", help="decode blends between designs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--latents")
    p.add_argument("--anchors", required=True, help="comma-separated design ids")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--weights", help="convex weights for three or more anchors")
    _add_mesh_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_interp)

    p = sub.add_parser("sample", help="decode diagonal-Gaussian samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--latents")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _add_mesh_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("train-cmap", help="fit the strain-to-latent map")
    p.add_argument("--strains", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--epochs", type=int, default=40000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="cmap")
    p.set_defaults(fn=cmd_train_cmap)

    p = sub.add_parser("gen-cond", help="strain target -> mesh")
    p.add_argument("--cmap", default="cmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", required=True, help="eps_x,eps_y,eps_z")
    _add_mesh_args(p)
    p.add_argument("--out", default="cond.obj")
    p.set_defaults(fn=cmd_gen_cond)

    p = sub.add_parser("run", help="end-to-end pipeline")
    p.add_argument("--config")
    p.add_argument("--tiny", action="store_true", help="desk-scale defaults when no config is given")
    p.add_argument("--root", default="exp")
    p.add_argument("--stages", help="comma-separated subset")
    p.add_argument("--force", action="store_true", help="rerun finished stages")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("init-config", help="write a default run config")
    p.add_argument("--tiny", action="store_true")
    p.add_argument("--out", default="forge.json")
    p.set_defaults(fn=cmd_init_config)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configure_threads()
        args.fn(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (_Invalid, ConfigError, ValueError, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
