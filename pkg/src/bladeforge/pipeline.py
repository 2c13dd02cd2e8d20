"""End-to-end runner: dataset -> labels -> training -> latents -> meshes -> reports.

Artifacts live under ``<root>/<config hash>/`` in ``dataset``, ``sdf``,
``checkpoints``, ``latents``, ``meshes`` and ``reports``.  Each finished stage
leaves a marker in ``stages/`` so a rerun with the same config skips it.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from pathlib import Path

import numpy as np

from . import condmap, latent, metrics
from .blades import BladeParams, generate_dataset, load_manifest
from .config import RunConfig, SdfConfig
from .decoder import LatentTable, infer_latent, load_checkpoint, train
from .errors import ForgeError, StageError
from .geom import PointCloud, UnitCubeTransform, normalize_to_unit_cube
from .io import read_obj, read_ply, write_latents, write_ply
from .meshing import TriangleMesh, check_watertight, extract_mesh
from .sdf import SdfSampleSet, build_field, generate_samples

log = logging.getLogger(__name__)

STAGES = ("gen-dataset", "label", "train", "infer-latent", "extract", "eval-dist",
          "pca", "sample", "interp", "train-cmap", "gen-cond")
COND_STAGES = ("train-cmap", "gen-cond")
SUBDIRS = ("dataset", "sdf", "checkpoints", "latents", "meshes", "reports", "stages")


def write_provenance(path, stage: str, config_hash: str, **extra):
    """Sidecar ``<artifact>.prov.json`` naming the config hash, stage and time."""
    info = {"artifact": Path(path).name, "config_hash": config_hash, "stage": stage,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    info.update(extra)
    Path(str(path) + ".prov.json").write_text(json.dumps(info, indent=2))


def design_seed(base: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index), int(stream)]).generate_state(1)[0])


# -- reusable stage bodies (also used by the CLI) ---------------------------

def label_design(ply_path, design_id: str, sdf_cfg: SdfConfig, seed: int):
    """Normalize one cloud and draw its SDF samples.

    Returns ``(samples, surface_points, transform)``; the surface points are
    the hull-adjacent subset in normalized coordinates (the evaluation
    reference).
    """
    cloud = PointCloud(read_ply(ply_path), design_id)
    norm, scale, center = normalize_to_unit_cube(cloud)
    field = build_field(norm, sdf_cfg.tol_sign, sdf_cfg.tol_surf)
    samples = generate_samples(field, sdf_cfg.n_samples, sdf_cfg.delta, sdf_cfg.band_fraction,
                               rng_seed=seed, design_id=design_id)
    samples.extra["transform"] = UnitCubeTransform(scale, center).to_dict()
    return samples, field.surf_points, UnitCubeTransform(scale, center)


def label_dataset(in_dir, out_dir, sdf_cfg: SdfConfig, seed: int = 0, config_hash: str = "",
                  ids=None) -> list[str]:
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(in_dir)
    done = []
    for i, d in enumerate(manifest["designs"]):
        did = d["design_id"]
        if ids is not None and did not in ids:
            continue
        samples, surf, _ = label_design(in_dir / f"design_{did}.ply", did, sdf_cfg, design_seed(seed, i, 2))
        samples.save(out_dir / f"{did}.bin")
        write_ply(out_dir / f"{did}_surf.ply", surf)
        if config_hash:
            write_provenance(out_dir / f"{did}.bin", "label", config_hash)
            write_provenance(out_dir / f"{did}_surf.ply", "label", config_hash)
        done.append(did)
    return done


def load_samples(sdf_dir, ids) -> list[SdfSampleSet]:
    return [SdfSampleSet.load(Path(sdf_dir) / f"{did}.bin") for did in ids]


def mesh_report(mesh: TriangleMesh) -> dict:
    ok, rep = check_watertight(mesh)
    asp = mesh.aspect_ratios()
    return {"n_vertices": len(mesh.vertices), "n_triangles": len(mesh.triangles), "watertight": ok,
            "reason": rep.get("reason", ""), "max_aspect": float(asp.max()) if len(asp) else None}


# -- runner ---------------------------------------------------------------

class Pipeline:
    def __init__(self, cfg: RunConfig, root="exp", force: bool = False, progress=None):
        self.cfg = cfg.validate()
        self.hash = cfg.hash()
        self.dir = Path(root) / self.hash
        self.force = force
        self.progress = progress or (lambda msg: log.info(msg))
        for sub in SUBDIRS:
            (self.dir / sub).mkdir(parents=True, exist_ok=True)
        cfg.save(self.dir / "config.json")

    # bookkeeping ---------------------------------------------------------

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def done(self, stage: str) -> bool:
        return self.path("stages", f"{stage}.json").exists()

    def _mark(self, stage: str, artifacts):
        rel = sorted(str(Path(a).relative_to(self.dir)) for a in artifacts)
        self.path("stages", f"{stage}.json").write_text(json.dumps({
            "stage": stage, "config_hash": self.hash, "seed": self.cfg.seed,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "artifacts": rel}, indent=2))

    def prov(self, path, stage, **extra):
        write_provenance(path, stage, self.hash, **extra)

    def ids(self, split: str) -> list[str]:
        m = load_manifest(self.path("dataset"))
        return [d["design_id"] for d in m["designs"] if d["split"] == split]

    def params(self) -> dict[str, BladeParams]:
        m = load_manifest(self.path("dataset"))
        keys = set(BladeParams.__dataclass_fields__)
        return {d["design_id"]: BladeParams.from_dict({k: v for k, v in d.items() if k in keys})
                for d in m["designs"]}

    def model(self):
        return load_checkpoint(self.path("checkpoints", "decoder"))

    def latents(self, split: str) -> LatentTable:
        return LatentTable.load(self.path("latents", f"{split}.csv"))

    def mesh(self, *parts) -> TriangleMesh:
        v, t = read_obj(self.path("meshes", *parts))
        return TriangleMesh(v, t)

    def _extract(self, model, z):
        m = self.cfg.mesh
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return extract_mesh(model, z, m.res, -m.bound, m.bound,
                                max_aspect=m.max_aspect if m.max_aspect > 0 else None)

    def _save_mesh(self, mesh, path, stage, **extra) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        mesh.save(path)
        self.prov(path, stage, **mesh_report(mesh), **extra)
        return path

    # stages --------------------------------------------------------------

    def stage_gen_dataset(self):
        d = self.cfg.dataset
        generate_dataset(self.path("dataset"), d.n_train, d.n_test, self.cfg.seed, d.n_surface, d.n_interior)
        out = [self.path("dataset", "manifest.json")]
        for p in sorted(self.path("dataset").glob("design_*.ply")):
            self.prov(p, "gen-dataset")
            out.append(p)
        self.prov(out[0], "gen-dataset")
        return out

    def stage_label(self):
        ids = label_dataset(self.path("dataset"), self.path("sdf"), self.cfg.sdf, self.cfg.seed, self.hash)
        return [self.path("sdf", f"{i}.bin") for i in ids]

    def stage_train(self):
        ids = self.ids("train")
        sets = load_samples(self.path("sdf"), ids)
        ckpt = self.path("checkpoints", "decoder")
        res = train(sets, self.cfg.train_config(), checkpoint_dir=ckpt,
                    progress=lambda e, loss: self.progress(f"  epoch {e} loss {loss:.6f}"))
        out = self.path("latents", "train.csv")
        res.latents.save(out)
        for p in (out, ckpt / "manifest.json", ckpt / "weights.f32"):
            self.prov(p, "train")
        return [out, ckpt / "manifest.json"]

    def stage_infer_latent(self):
        model, _, tcfg, _ = self.model()
        tcfg = self.cfg.train_config()
        ids = self.ids("test")
        codes = [infer_latent(model, s, tcfg, seed=self.cfg.seed) for s in load_samples(self.path("sdf"), ids)]
        out = self.path("latents", "test.csv")
        write_latents(out, ids, np.asarray(codes).reshape(len(ids), model.latent_dim))
        self.prov(out, "infer-latent")
        return [out]

    def stage_extract(self):
        model, *_ = self.model()
        out = []
        limit = self.cfg.mesh.n_extract_test
        for split in ("train", "test"):
            table = self.latents(split)
            ids = table.design_ids if split == "train" or not limit else table.design_ids[:limit]
            for did in ids:
                mesh = self._extract(model, table.code(did))
                out.append(self._save_mesh(mesh, self.path("meshes", split, f"{did}.obj"), "extract"))
        return out

    def stage_eval_dist(self):
        out = []
        e = self.cfg.eval
        for split in ("train", "test"):
            reports = []
            for p in sorted(self.path("meshes", split).glob("*.obj")):
                did = p.stem
                ref = read_ply(self.path("sdf", f"{did}_surf.ply"))
                mesh = self.mesh(split, p.name)
                if mesh.is_empty:
                    raise StageError("eval-dist", f"design {did}: no predicted surface", [p])
                reports.append(metrics.distance_report(did, ref, mesh, n_pred_samples=e.n_pred_samples))
            if not reports:
                continue
            csv_path = self.path("reports", f"dist_{split}.csv")
            metrics.write_distance_csv(csv_path, reports)
            hist = self.path("reports", f"dist_{split}_hist.json")
            metrics.write_histogram_json(hist, [r.mean_directed_distance for r in reports], e.hist_bins)
            for p in (csv_path, hist):
                self.prov(p, "eval-dist")
            out += [csv_path, hist]
        return out

    def stage_pca(self):
        train_t = self.latents("train")
        use_test = self.cfg.latent.pca_on == "test" and self.path("latents", "test.csv").exists()
        table = self.latents("test") if use_test else train_t
        if len(table) < 2:
            table = train_t
        basis = latent.fit_pca(table.codes)
        bpath = self.path("reports", "pca.json")
        basis.save(bpath)
        marg = latent.marginal_stats(table.codes)
        mpath = self.path("reports", "marginals.json")
        mpath.write_text(json.dumps([{
            "dim": m.dim, "mean": m.mean, "variance": m.variance, "skewness": m.skewness,
            "bin_edges": m.bin_edges.tolist(), "counts": m.counts.tolist()} for m in marg], indent=1))
        gauss = latent.DiagonalGaussian.fit(train_t.codes, self.cfg.latent.temperature) if len(train_t) > 1 \
            else latent.DiagonalGaussian(train_t.codes[0], np.zeros(train_t.latent_dim), self.cfg.latent.temperature)
        gpath = self.path("latents", "gaussian.json")
        gpath.write_text(json.dumps(gauss.to_dict()))
        # traversal of the leading axis, as a mesh series
        model, *_ = self.model()
        lc = self.cfg.latent
        sd = float(np.sqrt(basis.explained_variance[0]))
        coords = np.linspace(-lc.traverse_span * sd, lc.traverse_span * sd, lc.traverse_steps)
        out = [bpath, mpath, gpath]
        ratios = []
        for k, z in enumerate(latent.traverse(basis, 0, coords)):
            mesh = self._extract(model, z)
            out.append(self._save_mesh(mesh, self.path("meshes", "traverse", f"pc0_{k:02d}.obj"), "pca"))
            ratios.append(metrics.section_extent_ratio(mesh.vertices) if not mesh.is_empty else float("nan"))
        tpath = self.path("reports", "traverse_pc0.json")
        tpath.write_text(json.dumps({"coords": coords.tolist(), "top_bottom_ratio": ratios}, indent=1))
        for p in (bpath, mpath, gpath, tpath):
            self.prov(p, "pca", fitted_on="test" if table is not train_t else "train")
        return out + [tpath]

    def stage_sample(self):
        g = latent.DiagonalGaussian.from_dict(json.loads(self.path("latents", "gaussian.json").read_text()))
        codes = latent.sample_codes(g, self.cfg.latent.n_samples, seed=self.cfg.seed)
        cpath = self.path("latents", "samples.csv")
        write_latents(cpath, [f"sample_{k:03d}" for k in range(len(codes))], codes)
        self.prov(cpath, "sample")
        model, *_ = self.model()
        out = [cpath]
        for k, z in enumerate(codes):
            out.append(self._save_mesh(self._extract(model, z), self.path("meshes", "samples", f"sample_{k:03d}.obj"),
                                       "sample"))
        return out

    def stage_interp(self):
        t = self.latents("train")
        if len(t) < 2:
            return []
        model, *_ = self.model()
        alphas = np.linspace(0.0, 1.0, self.cfg.latent.interp_steps)
        out = []
        for k, z in enumerate(latent.interpolate(t.codes[0], t.codes[1], alphas)):
            out.append(self._save_mesh(self._extract(model, z), self.path("meshes", "interp", f"step_{k:02d}.obj"),
                                       "interp", alpha=float(alphas[k]), a=t.design_ids[0], b=t.design_ids[1]))
        return out

    def _strains(self):
        c = self.cfg.cond
        if c.strains_csv:
            return condmap.read_strains(c.strains_csv)
        params = self.params()
        ids = self.ids("train")
        eps = np.array([condmap.surrogate_strains(params[d], c.surrogate_noise, design_seed(self.cfg.seed, i, 3))
                        for i, d in enumerate(ids)])
        return ids, eps

    def stage_train_cmap(self):
        ids, eps = self._strains()
        spath = self.path("dataset", "strains.csv")
        condmap.write_strains(spath, ids, eps)
        table = self.latents("train")
        known = set(table.design_ids)
        keep = [i for i, d in enumerate(ids) if d in known]
        if len(keep) < 1:
            raise StageError("train-cmap", "no strain rows match the training designs", [spath])
        codes = np.stack([table.code(ids[i]) for i in keep])
        model, curve = condmap.train_cond(eps[keep], codes, self.cfg.cond.cfg)
        cdir = self.path("checkpoints", "cmap")
        model.save(cdir)
        cpath = self.path("reports", "cmap_nrmse.csv")
        every = self.cfg.cond.cfg.log_every
        cpath.write_text("epoch,nrmse_percent\n" + "".join(f"{k * every + 1},{v!r}\n" for k, v in enumerate(curve)))
        for p in (spath, cdir / "manifest.json", cpath):
            self.prov(p, "train-cmap")
        return [spath, cdir / "manifest.json", cpath]

    def stage_gen_cond(self):
        cm = condmap.CondModel.load(self.path("checkpoints", "cmap"))
        model, *_ = self.model()
        ids, eps = condmap.read_strains(self.path("dataset", "strains.csv"))
        table = self.latents("train")
        out, rows = [], []
        target = eps.min(axis=0)
        try:
            mesh, _ = condmap.conditional_generate(cm, model, target, self.cfg.mesh.res,
                                                   lo=-self.cfg.mesh.bound, hi=self.cfg.mesh.bound)
        except ValueError as e:
            raise StageError("gen-cond", str(e)) from e
        out.append(self._save_mesh(mesh, self.path("meshes", "cond", "min_strain.obj"), "gen-cond",
                                   target=target.tolist()))
        for did, e in zip(ids, eps):
            if did not in table.design_ids:
                continue
            mesh, _ = condmap.conditional_generate(cm, model, e, self.cfg.mesh.res,
                                                   lo=-self.cfg.mesh.bound, hi=self.cfg.mesh.bound)
            out.append(self._save_mesh(mesh, self.path("meshes", "cond", f"{did}.obj"), "gen-cond",
                                       target=e.tolist()))
            ref_path = self.path("meshes", "train", f"{did}.obj")
            if ref_path.exists():
                ref = self.mesh("train", f"{did}.obj")
                pts = ref.sample_surface(self.cfg.eval.n_pred_samples // 5, np.random.default_rng(self.cfg.seed))
                rows.append((did, metrics.surface_distance(pts, mesh, self.cfg.eval.n_pred_samples)))
        rpath = self.path("reports", "cond_dist.csv")
        rpath.write_text("design_id,distance\n" + "".join(f"{d},{v!r}\n" for d, v in rows))
        self.prov(rpath, "gen-cond")
        return out + [rpath]

    # driver --------------------------------------------------------------

    def run(self, stages=None) -> Path:
        wanted = list(STAGES if stages is None else stages)
        unknown = set(wanted) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages: {sorted(unknown)}")
        if not self.cfg.cond.enabled:
            wanted = [s for s in wanted if s not in COND_STAGES]
        if self.cfg.dataset.n_test == 0:
            wanted = [s for s in wanted if s != "infer-latent"]
            self._empty_test_table()
        for stage in STAGES:
            if stage not in wanted:
                continue
            if self.done(stage) and not self.force:
                self.progress(f"[skip] {stage}")
                continue
            self.progress(f"[run ] {stage}")
            fn = getattr(self, "stage_" + stage.replace("-", "_"))
            try:
                artifacts = fn()
            except StageError:
                raise
            except (ForgeError, ValueError, OSError, RuntimeError, KeyError) as e:
                raise StageError(stage, f"{type(e).__name__}: {e}", [self.dir]) from e
            self._mark(stage, artifacts)
        return self.dir

    def _empty_test_table(self):
        p = self.path("latents", "test.csv")
        if not p.exists():
            write_latents(p, [], np.zeros((0, self.cfg.train.latent_dim)))


def run_pipeline(cfg: RunConfig, root="exp", stages=None, force: bool = False, progress=None) -> Path:
    return Pipeline(cfg, root, force, progress).run(stages)
