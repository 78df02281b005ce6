"""Batch entry points: preprocess -> optimize -> slice, plus report and gradcheck.

Every stage writes into a subdirectory of ``--out`` and records a stamp in
``stamps.json`` holding the hash of its inputs and of the files it wrote. A
stage whose input hash is unchanged is skipped; a stage whose upstream
outputs changed invalidates everything below it.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure
(including an unmet collision constraint), 4 infeasible slicing plan.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import zipfile
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from . import fields, gradcheck, trainer
from .cage import CageError, generate_cage, load_cage, save_cage
from .deformation import DeformationError, deform
from .config import ConfigError, JobConfig, digest, load_config
from .fea import BoundaryConditions, FeaError, read_stress_field, select_top_stress_region, \
    solve_elasticity, voxelize, write_stress_field
from .implicit import SolidSpecError, build_solid, extract_zero_surface
from .losses import SampleSetB, SampleSetT, sample_boundary
from .meshio import MeshFormatError, read_scalar_field
from .objective import make_scene
from .slicer import InfeasiblePlanError, export_layers, histogram_csv, pick_isovalues, \
    report_histograms, slice_field

logger = logging.getLogger("curvedslice")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4
STAGES = ("preprocess", "optimize", "slice", "report")
UPSTREAM = {"optimize": "preprocess", "slice": "optimize", "report": "optimize"}


class StageError(RuntimeError):
    def __init__(self, msg, code=EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


# -- small file helpers ------------------------------------------------------


def save_arrays(path, **arrays) -> None:
    """npz with a fixed member timestamp so identical arrays give identical bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", (1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_arrays(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def save_boundary(path, B: SampleSetB) -> None:
    save_arrays(path, points=B.points, normals=B.normals, areas=B.areas, neighbors=B.neighbors,
                active=B.active, dropped=np.array(B.dropped))


def load_boundary(path) -> SampleSetB:
    a = load_arrays(path)
    return SampleSetB(a["points"], a["normals"], a["areas"], a["neighbors"], a["active"], int(a["dropped"]))


def save_stress_samples(path, T: SampleSetT) -> None:
    save_arrays(path, points=T.points, tau=T.tau, volumes=T.volumes)


def load_stress_samples(path) -> SampleSetT:
    a = load_arrays(path)
    return SampleSetT(a["points"].reshape(-1, 3), a["tau"].reshape(-1, 3), a["volumes"])


def write_vectors(path, arr) -> None:
    Path(path).write_text("".join(" ".join(repr(float(x)) for x in row) + "\n" for row in np.asarray(arr)))


def read_vectors(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2)


def _files_digest(paths) -> str:
    return digest(*[{"name": p.name} for p in paths], *paths)


def _tree_files(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file())


# -- job directory -----------------------------------------------------------


class JobDir:
    def __init__(self, out):
        self.root = Path(out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.stamp_path = self.root / "stamps.json"

    def stage(self, name) -> Path:
        return self.root / name

    def stamps(self) -> dict:
        if not self.stamp_path.exists():
            return {}
        return json.loads(self.stamp_path.read_text())

    def write_stamp(self, name, input_hash, output_hash) -> None:
        st = self.stamps()
        st[name] = {"input": input_hash, "output": output_hash}
        # anything downstream is now stale
        for down, up in UPSTREAM.items():
            if up == name and down in st and st[down].get("upstream") != output_hash:
                del st[down]
        if name in UPSTREAM:
            st[name]["upstream"] = st[UPSTREAM[name]]["output"]
        self.stamp_path.write_text(json.dumps(st, indent=1, sort_keys=True) + "\n")

    def drop_stamp(self, name) -> None:
        st = self.stamps()
        if st.pop(name, None) is not None:
            self.stamp_path.write_text(json.dumps(st, indent=1, sort_keys=True) + "\n")

    def output_hash(self, name) -> str:
        return _files_digest(_tree_files(self.stage(name)))

    def valid(self, name) -> bool:
        st = self.stamps().get(name)
        if st is None or not self.stage(name).exists():
            return False
        if st["output"] != self.output_hash(name):
            return False
        up = UPSTREAM.get(name)
        return up is None or (self.valid(up) and st.get("upstream") == self.stamps()[up]["output"])

    def require(self, name) -> dict:
        if not self.valid(name):
            raise StageError(f"stage '{name}' has no valid output in {self.root}; run it first")
        return self.stamps()[name]

    def up_to_date(self, name, input_hash) -> bool:
        return self.valid(name) and self.stamps()[name]["input"] == input_hash

    @contextmanager
    def lock(self):
        path = self.root / "job.lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(f"{path} exists: another job is using this directory "
                             "(delete the lock if that job is gone)") from None
        try:
            os.write(fd, f"{os.getpid()}\n".encode())
            os.close(fd)
            yield
        finally:
            path.unlink(missing_ok=True)


# -- stage helpers -------------------------------------------------------------


def _solid(cfg: JobConfig):
    spec = dict(cfg.solid)
    base = spec.pop("_base", None) or cfg.base_dir
    return build_solid(spec, base_dir=base)


def _referenced_files(cfg: JobConfig) -> list[Path]:
    out = []
    spec = cfg.solid
    base = Path(spec.get("_base") or cfg.base_dir)
    for prim in spec.get("primitives", []):
        if isinstance(prim, dict) and prim.get("file"):
            p = Path(prim["file"])
            out.append(p if p.is_absolute() else base / p)
    for p in (cfg.cage.file, cfg.stress.file if cfg.stress.enabled else None):
        if p:
            out.append(cfg.path(p))
    if cfg.stress.enabled and isinstance(cfg.stress.bc, str):
        out.append(cfg.path(cfg.stress.bc))
    return out


def _preprocess_input(cfg: JobConfig) -> str:
    d = cfg.to_dict()
    sub = {k: d[k] for k in ("solid", "cage", "boundary", "stress", "seed")}
    try:
        return digest(sub, *_referenced_files(cfg))
    except OSError as exc:
        raise StageError(f"missing input file: {exc}") from exc


def _optimize_input(cfg: JobConfig, jd: JobDir, init_field) -> str:
    d = cfg.to_dict()
    sub = {k: d[k] for k in ("constants", "weights", "network", "trainer", "pretrain", "seed")}
    parts = [sub, jd.require("preprocess")["output"]]
    if init_field is not None:
        parts.append(Path(init_field))
    return digest(*parts)


def load_scene(cfg: JobConfig, jd: JobDir):
    pre = jd.stage("preprocess")
    cage = load_cage(pre / "cage.tet")
    B = load_boundary(pre / "boundary.npz")
    T = load_stress_samples(pre / "stress_samples.npz")
    return make_scene(cage, B, T, cfg.params, cfg.weights, gamma=cfg.gamma)


def cmd_preprocess(cfg: JobConfig, jd: JobDir) -> int:
    h_in = _preprocess_input(cfg)
    if jd.up_to_date("preprocess", h_in):
        print("preprocess: up to date")
        return EXIT_OK
    out = jd.stage("preprocess")
    out.mkdir(exist_ok=True)
    for p in _tree_files(out):
        p.unlink()
    solid = _solid(cfg)
    if cfg.cage.file:
        cage = load_cage(cfg.path(cfg.cage.file))
    else:
        cage = generate_cage(solid, cfg.cage.voxel_size, cfg.cage.dilation)
    cage.check()
    bs = cfg.boundary
    platform = solid.bbox[0][2] if bs.platform_z is None else bs.platform_z
    surf = extract_zero_surface(solid, bs.surface_resolution)
    B = sample_boundary(solid, surf, bs.count, platform_z=platform, k=bs.k, seed=cfg.seed,
                        oversample=bs.oversample)
    T = SampleSetT.empty()
    if cfg.stress.enabled:
        if cfg.stress.file:
            sf = read_stress_field(cfg.path(cfg.stress.file))
        else:
            bc = cfg.stress.bc
            if isinstance(bc, str):
                bc = json.loads(cfg.path(bc).read_text())
            sf = solve_elasticity(voxelize(solid, cfg.stress.voxel_size), BoundaryConditions.from_dict(bc))
            write_stress_field(out / "stress_field.txt", sf)
        T = select_top_stress_region(sf, cfg.stress.fraction)
    save_cage(out / "cage.tet", cage)
    save_boundary(out / "boundary.npz", B)
    save_stress_samples(out / "stress_samples.npz", T)
    jd.write_stamp("preprocess", h_in, jd.output_hash("preprocess"))
    print(f"preprocess: cage {cage.n_elements} tets, B {len(B)} samples ({int(B.active.sum())} active), "
          f"T {len(T)} samples")
    return EXIT_OK


def _latest_checkpoint(opt: Path) -> Path | None:
    cands = sorted(opt.glob("checkpoints/epoch_*"))
    final = opt / "checkpoint"
    if final.exists():
        cands.append(final)
    best, best_epoch = None, -1
    for c in cands:
        try:
            ep = int(np.load(c / "optimizer.npz")["epoch"])
        except (OSError, KeyError, ValueError):
            continue
        if ep >= best_epoch:
            best, best_epoch = c, ep
    return best


def _trim_log(path: Path, epoch: int) -> None:
    """Keep the header and rows for epochs before ``epoch`` (drops the closing row too)."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < epoch]
    # a closing row repeats the last epoch number; keep only rows of completed epochs once
    seen, rows = set(), []
    for ln in keep[1:]:
        e = int(ln.split(",", 1)[0])
        if e not in seen:
            seen.add(e)
            rows.append(ln)
    path.write_text("".join(keep[:1] + rows))


def cmd_optimize(cfg: JobConfig, jd: JobDir, init_field=None, resume: bool = False) -> int:
    h_in = _optimize_input(cfg, jd, init_field)
    if jd.up_to_date("optimize", h_in) and not resume:
        print("optimize: up to date")
        return EXIT_OK
    scene = load_scene(cfg, jd)
    out = jd.stage("optimize")
    ckdir = out / "checkpoints"
    log_path = out / "loss_log.csv"
    tcfg = cfg.trainer
    state = None
    if resume:
        ck = _latest_checkpoint(out)
        if ck is None:
            raise StageError("--resume given but no checkpoint found")
        state = trainer.load_checkpoint(ck)
        _trim_log(log_path, state.epoch)
        print(f"optimize: resuming from {ck} at epoch {state.epoch}")
    else:
        if out.exists():
            for p in _tree_files(out):
                p.unlink()
        out.mkdir(exist_ok=True)
        lo, hi = scene.cage.bbox
        net = cfg.network
        q = fields.init_network(fields.QUATERNION, net.depth, net.width, seed=cfg.seed, omega0=net.omega0,
                                bounds=(lo, hi))
        s = fields.init_network(fields.SCALE, net.depth, net.width, seed=cfg.seed + 1, omega0=net.omega0,
                                bounds=(lo, hi))
        if init_field is not None:
            target = read_scalar_field(init_field, scene.cage.n_vertices)
            mse, _ = trainer.pretrain_fit(scene, q, s, target, cfg.pretrain.epochs, cfg.pretrain.lr)
            print(f"optimize: pre-trained on {init_field} (centred mse {mse:.4g})")
        state = trainer.new_state(q, s, tcfg)
    res = trainer.optimize(scene, state, tcfg, log_path=log_path,
                           checkpoint_dir=ckdir if tcfg.checkpoint_every else None)
    trainer.save_checkpoint(out / "checkpoint", state)
    ev_state = _final_state(scene, state)
    save_cage(out / "deformed_cage.tet", scene.cage, vertices=ev_state.xi)
    write_vectors(out / "lpd.txt", ev_state.lpd)
    summary = {"status": res.status, "converged": res.converged, "epochs_run": res.epochs_run,
               "epoch": state.epoch, "final": res.final.as_row() if res.final else None,
               "sf_violating": res.final.extras.get("sf_violating") if res.final else None,
               "sr_violating": res.final.extras.get("sr_violating") if res.final else None,
               "degenerate": int(ev_state.degenerate.sum()), "restored_epoch": res.restored_epoch}
    (out / "result.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"optimize: {res.status}; {res.epochs_run} epochs; "
          + (" ".join(f"{k}={v:.4g}" for k, v in res.final.as_row().items()) if res.final else ""))
    if not res.success:
        jd.drop_stamp("optimize")
        print(f"optimize: last good checkpoint at {out / 'checkpoint'}", file=sys.stderr)
        return EXIT_NUMERIC
    jd.write_stamp("optimize", h_in, jd.output_hash("optimize"))
    return EXIT_OK


def _final_state(scene, state):
    centers = scene.cage.centers
    return deform(scene.system, fields.forward(state.qnet, centers).value,
                  fields.forward(state.snet, centers).value)


def cmd_slice(cfg: JobConfig, jd: JobDir) -> int:
    up = jd.require("optimize")
    h_in = digest({"slicer": cfg.to_dict()["slicer"]}, up["output"])
    if jd.up_to_date("slice", h_in):
        print("slice: up to date")
        return EXIT_OK
    solid = _solid(cfg)
    cage = load_cage(jd.stage("preprocess") / "cage.tet")
    xi = load_cage(jd.stage("optimize") / "deformed_cage.tet").vertices
    plan = pick_isovalues(cage, xi, solid, cfg.slicer.t_min, cfg.slicer.t_max)
    layers = slice_field(cage, xi, solid, plan)
    out = jd.stage("slice")
    if out.exists():
        for p in _tree_files(out):
            p.unlink()
    export_layers(layers, out, plan)
    jd.write_stamp("slice", h_in, jd.output_hash("slice"))
    print(f"slice: {len(layers)} layers, thickness estimate [{plan.t_min_est:.3g}, {plan.t_max_est:.3g}] mm")
    return EXIT_OK


def cmd_report(cfg: JobConfig, jd: JobDir) -> int:
    up = jd.require("optimize")
    c = cfg.params
    h_in = digest({"alpha": c.alpha_deg, "beta": c.beta_deg}, up["output"])
    pre, opt = jd.stage("preprocess"), jd.stage("optimize")
    cage = load_cage(pre / "cage.tet")
    B = load_boundary(pre / "boundary.npz")
    T = load_stress_samples(pre / "stress_samples.npz")
    d = read_vectors(opt / "lpd.txt")
    if len(d) != cage.n_elements:
        raise StageError("lpd sidecar does not match the cage")
    eb, _ = cage.locate(B.points)
    et = cage.locate(T.points)[0] if len(T) else np.zeros(0, int)
    bv, tv = eb >= 0, et >= 0
    ok = np.isfinite(d).all(axis=1)
    bv &= ok[np.where(bv, eb, 0)]
    tv &= ok[np.where(tv, et, 0)]
    rep = report_histograms(B, T, d[np.where(bv, eb, 0)], d[np.where(tv, et, 0)], c.alpha_deg, c.beta_deg,
                            b_valid=bv, t_valid=tv)
    if not jd.up_to_date("report", h_in):
        out = jd.stage("report")
        out.mkdir(exist_ok=True)
        (out / "sf_histogram.csv").write_text(histogram_csv(rep.sf_counts, rep.sf_weights))
        (out / "sr_histogram.csv").write_text(histogram_csv(rep.sr_counts, rep.sr_weights))
        (out / "summary.json").write_text(json.dumps(rep.summary(), indent=1, sort_keys=True) + "\n")
        jd.write_stamp("report", h_in, jd.output_hash("report"))
    print(f"report: SF violating fraction {rep.sf_violating:.4f} over {rep.n_sf} samples; "
          f"SR violating fraction {rep.sr_violating:.4f} over {rep.n_sr} samples")
    return EXIT_OK


def cmd_gradcheck(path=None, seed=None) -> int:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise StageError(f"cannot read gradcheck config: {exc}") from exc
    extra = set(doc) - {"seed", "tol", "max_params"}
    if extra:
        raise StageError(f"unknown gradcheck keys: {sorted(extra)}")
    s = int(doc.get("seed", 0) if seed is None else seed)
    results, secs = gradcheck.run_all(seed=s, max_params=doc.get("max_params"), tol=float(doc.get("tol", 1e-4)))
    print(f"{'path':<10s} {'max rel err':>10s} {'checked':>7s}")
    for r in results:
        print(r.row())
    ok = all(r.passed for r in results)
    print(f"gradcheck: {'all paths pass' if ok else 'FAILED'} in {secs:.1f} s")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="curvedslice",
        description="Curved-layer slicing by optimizing a neural deformation field. "
                    "Config angles are in degrees and lengths in mm.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_out=True):
        sp.add_argument("--config", required=True, help="job JSON (see curvedslice.config)")
        if need_out:
            sp.add_argument("--out", required=True, help="job output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread cap")

    common(sub.add_parser("preprocess", help="cage, boundary samples and stress samples"))
    sp = sub.add_parser("optimize", help="train the quaternion and scale fields")
    common(sp)
    sp.add_argument("--init-field", default=None, help="per-cage-vertex scalar field to pre-train G on")
    sp.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    common(sub.add_parser("slice", help="extract and trim layers"))
    common(sub.add_parser("report", help="LPD angle histograms and violating fractions"))
    sp = sub.add_parser("gradcheck", help="finite-difference check of all gradient paths")
    sp.add_argument("--config", default=None, help="optional JSON with seed, tol, max_params")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--threads", type=int, default=None)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            if args.command == "gradcheck":
                return cmd_gradcheck(args.config, args.seed)
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            jd = JobDir(args.out)
            with jd.lock():
                if args.command == "preprocess":
                    return cmd_preprocess(cfg, jd)
                if args.command == "optimize":
                    return cmd_optimize(cfg, jd, args.init_field, args.resume)
                if args.command == "slice":
                    return cmd_slice(cfg, jd)
                return cmd_report(cfg, jd)
    except (ConfigError, SolidSpecError, CageError, MeshFormatError, FeaError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return exc.code
    except InfeasiblePlanError as exc:
        ids = exc.elements[:20].tolist()
        print(f"{args.command}: infeasible plan: {exc} (elements {ids}{'...' if len(exc.elements) > 20 else ''})",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FloatingPointError, trainer.TrainingError, DeformationError, np.linalg.LinAlgError) as exc:
        print(f"{args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
