"""Command-line surface tying the pipeline together.

Every subcommand exits 0 on success and nonzero with a single-line
diagnostic on failure; all artifacts are written via temp-then-rename and a
run manifest is dropped next to the outputs.
"""

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from ._atomic import atomic_write_bytes, atomic_write_text
from . import analysis, calib, imagery, metrics, phantom, solver, stainlib

JOBS_ENV = "PAPSMIX_THREADS"


class CliError(Exception):
    """User-facing failure; maps to exit code 2."""


def _parse_floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise CliError(f"bad float list {text!r}") from exc


def _light_for(cube: imagery.SpectralCube, light_arg) -> imagery.IncidentLight:
    if light_arg is None:
        return imagery.IncidentLight.flat(cube.channels)
    values = _parse_floats(light_arg)
    if len(values) != cube.channels:
        raise CliError(
            f"--light needs {cube.channels} values, got {len(values)}"
        )
    return imagery.IncidentLight(np.asarray(values))


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(f"no such file: {path}")
    return path


def _load_density(path, light_arg, linearize: bool) -> imagery.SpectralCube:
    """Load an image and return it as an optical-density cube."""
    cube = imagery.load_cube(_require(path), linearize=linearize)
    if cube.role == imagery.ROLE_OPTICAL_DENSITY:
        return cube
    if cube.role == imagery.ROLE_INTENSITY:
        return imagery.to_optical_density(cube, _light_for(cube, light_arg))
    raise CliError(f"{path} holds abundances, not an image")


def _effective_jobs(jobs: int) -> int:
    cap = os.environ.get(JOBS_ENV)
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError as exc:
            raise CliError(f"bad {JOBS_ENV} value {cap!r}") from exc
    return max(1, jobs)


def _write_manifest(out_target: Path, command: str, inputs, outputs,
                    config_text: str, started: float) -> None:
    out_target = Path(out_target)
    if out_target.is_dir():
        path = out_target / "run_manifest.json"
    else:
        path = out_target.parent / (out_target.name + ".manifest.json")
    manifest = {
        "command": command,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "config_sha256": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "wall_time_s": time.monotonic() - started,
        "tool_version": __version__,
    }
    atomic_write_text(path, json.dumps(manifest, sort_keys=True) + "\n")


def _out_dir(arg) -> Path:
    path = Path(arg)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_abundance(path) -> solver.AbundanceField:
    cube = imagery.load_cube(_require(path))
    try:
        return solver.AbundanceField.from_cube(cube)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommand handlers.
# ---------------------------------------------------------------------------


def cmd_estimate_matrix(args) -> None:
    started = time.monotonic()
    entries = stainlib.load_regions_json(_require(args.regions))
    cubes = [_load_density(p, args.light, args.linearize) for p in args.images]
    per_dye = {dye: [] for dye in stainlib.DYES}
    for image_index, region in entries:
        if image_index >= len(cubes):
            raise CliError(f"region references image {image_index}, only {len(cubes)} given")
        per_dye[region.dye].extend(stainlib.extract_regions(cubes[image_index], [region]))
    vectors = []
    for dye in stainlib.DYES:
        if not per_dye[dye]:
            raise CliError(f"no region provided for dye {dye}")
        vectors.append(stainlib.estimate_stain_vector(per_dye[dye]))
    matrix = stainlib.build_stain_matrix(vectors, stainlib.DYES)
    out = Path(args.out)
    stainlib.save_matrix_csv(matrix, out)
    _write_manifest(out, "estimate-matrix", [*args.images, args.regions], [out],
                    json.dumps({"light": args.light, "linearize": args.linearize}),
                    started)


def cmd_unmix(args) -> None:
    started = time.monotonic()
    matrix = stainlib.load_matrix_csv(_require(args.matrix))
    density = _load_density(args.image, args.light, args.linearize)
    cfg = solver.load_config(_require(args.config)) if args.config else None
    if args.method == "cd":
        field, report = solver.cd_unmix(density.planes, matrix, clamp=not args.raw), None
    else:
        cfg = cfg or solver.METHOD_CONFIGS[args.method]
        field, report = solver.unmix(args.method, density.planes, matrix, cfg)
    out = _out_dir(args.out)
    outputs = [out / "abundance.msc"]
    imagery.save_cube(field.to_cube(), out / "abundance.msc")
    q = calib.load_calibration(_require(args.calibration)).q if args.calibration else calib.DEFAULT_Q
    if not args.no_heatmaps:
        for i, dye in enumerate(stainlib.DYES):
            png = out / f"abundance_{dye}.png"
            imagery.write_gray_png(field.planes[i] / q[i], png)
            outputs.append(png)
    if report is not None:
        solver.save_report_json(report, out / "solver_report.json")
        outputs.append(out / "solver_report.json")
    config_text = cfg.to_json() if cfg else json.dumps({"method": args.method})
    _write_manifest(out, "unmix", [args.image, args.matrix], outputs, config_text, started)


def cmd_ms_unmix(args) -> None:
    started = time.monotonic()
    matrix = stainlib.load_matrix_csv(_require(args.matrix))
    cube = imagery.load_cube(_require(args.cube))
    if cube.role != imagery.ROLE_OPTICAL_DENSITY:
        raise CliError("ms-unmix expects an optical-density cube")
    field = stainlib.ms_unmix(cube, matrix)
    out = _out_dir(args.out)
    cube_out = imagery.SpectralCube(planes=field.planes, role=imagery.ROLE_ABUNDANCE,
                                    labels=stainlib.DYES)
    imagery.save_cube(cube_out, out / "abundance.msc")
    _write_manifest(out, "ms-unmix", [args.cube, args.matrix],
                    [out / "abundance.msc"], "{}", started)


def cmd_calibrate(args) -> None:
    started = time.monotonic()
    ms_matrix = stainlib.load_matrix_csv(_require(args.ms_matrix))
    rgb_matrix = stainlib.load_matrix_csv(_require(args.rgb_matrix))
    samples = json.loads(_require(args.samples).read_text())
    by_dye = {}
    for entry in samples:
        dye = entry["dye"]
        if dye not in stainlib.DYES:
            raise CliError(f"unknown dye {dye!r} in samples")
        ms_cube = imagery.load_cube(_require(entry["ms"]))
        rgb_cube = imagery.load_cube(_require(entry["rgb"]))
        ms_planes, rgb_planes = ms_cube.planes, rgb_cube.planes
        if "region" in entry:
            x, y, w, h = (int(v) for v in entry["region"])
            ms_planes = ms_planes[:, y : y + h, x : x + w]
            rgb_planes = rgb_planes[:, y : y + h, x : x + w]
        idx = stainlib.DYES.index(dye)
        s_ms = calib.single_stain_abundance(ms_planes, ms_matrix.coeffs[:, idx])
        s_rgb = calib.single_stain_abundance(rgb_planes, rgb_matrix.coeffs[:, idx])
        by_dye[dye] = calib.calibration_coefficient(s_rgb, s_ms)
    missing = [d for d in stainlib.DYES if d not in by_dye]
    if missing:
        raise CliError(f"missing calibration samples for dyes: {', '.join(missing)}")
    if args.reference:
        ref = _load_abundance(args.reference)
        q = tuple(calib.robust_max(ref.planes[i], args.percentile) for i in range(4))
    else:
        q = calib.DEFAULT_Q
    cal = calib.CalibrationSet(p=tuple(by_dye[d] for d in stainlib.DYES), q=q)
    out = Path(args.out)
    calib.save_calibration(cal, out)
    _write_manifest(out, "calibrate", [args.ms_matrix, args.rgb_matrix, args.samples],
                    [out], cal.to_json(), started)


def cmd_evaluate(args) -> None:
    started = time.monotonic()
    gt = _load_abundance(args.gt)
    est = _load_abundance(args.est)
    if gt.planes.shape != est.planes.shape:
        raise CliError(
            f"shape mismatch: gt {gt.planes.shape} vs est {est.planes.shape}"
        )
    cal = calib.load_calibration(_require(args.calibration)) if args.calibration else calib.CalibrationSet()
    if args.apply_p:
        est = calib.apply_calibration(est, cal.p)
    if args.apply_q:
        gt = calib.normalize_abundance(gt, cal.q)
        est = calib.normalize_abundance(est, cal.q)
    result = metrics.evaluate(gt, est)
    image = args.image or Path(args.gt).stem
    method = args.method or Path(args.est).stem
    out = Path(args.out)
    metrics.write_report_csv([(image, method, result)], out)
    _write_manifest(out, "evaluate", [args.gt, args.est], [out],
                    json.dumps({"apply_p": args.apply_p, "apply_q": args.apply_q}),
                    started)


def _resolved_spec(args) -> phantom.PhantomSpec:
    spec = phantom.load_phantom_spec(_require(args.spec)) if args.spec else phantom.PhantomSpec()
    if args.seed is not None:
        spec = phantom.replace(spec, seed=args.seed)
    return spec


def cmd_phantom(args) -> None:
    started = time.monotonic()
    spec = _resolved_spec(args)
    truth = phantom.generate(spec)
    out = _out_dir(args.out)
    imagery.save_cube(truth.abundance.to_cube(), out / "truth.msc")
    imagery.save_cube(truth.ms_od, out / "ms_od.msc")
    imagery.save_cube(truth.rgb_od, out / "rgb_od.msc")
    imagery.write_gray_png(phantom.mask_to_png_values(truth.labels_mask), out / "mask.png")
    stainlib.save_matrix_csv(truth.ms_matrix, out / "ms_matrix.csv")
    stainlib.save_matrix_csv(truth.rgb_matrix, out / "rgb_matrix.csv")
    atomic_write_text(out / "phantom.json", spec.to_json() + "\n")
    outputs = ["truth.msc", "ms_od.msc", "rgb_od.msc", "mask.png",
               "ms_matrix.csv", "rgb_matrix.csv", "phantom.json"]
    _write_manifest(out, "phantom", [args.spec] if args.spec else [],
                    [out / name for name in outputs], spec.to_json(), started)


def cmd_benchmark(args) -> None:
    started = time.monotonic()
    spec = _resolved_spec(args)
    methods = args.methods.split(",")
    seeds = range(spec.seed, spec.seed + args.seeds)
    rows = phantom.benchmark(spec, methods=methods, seeds=seeds,
                             jobs=_effective_jobs(args.jobs))
    out = _out_dir(args.out)
    metrics.write_report_csv(rows, out / "benchmark.csv")
    summary = phantom.summarize(rows)
    atomic_write_text(out / "summary.json", json.dumps(summary, sort_keys=True) + "\n")
    _write_manifest(out, "benchmark", [args.spec] if args.spec else [],
                    [out / "benchmark.csv", out / "summary.json"],
                    spec.to_json() + args.methods, started)


def cmd_sweep(args) -> None:
    started = time.monotonic()
    spec = _resolved_spec(args)
    lambdas = _parse_floats(args.lambdas)
    lambda_tvs = _parse_floats(args.lambda_tvs)
    points = phantom.sweep(spec, lambdas, lambda_tvs, method=args.method,
                           jobs=_effective_jobs(args.jobs))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["lambda_sparse", "lambda_tv", "sre_db"])
    for lam, lam_tv, sre_db in points:
        writer.writerow([repr(float(lam)), repr(float(lam_tv)), repr(float(sre_db))])
    out = Path(args.out)
    atomic_write_text(out, buf.getvalue())
    _write_manifest(out, "sweep", [args.spec] if args.spec else [], [out],
                    spec.to_json() + args.lambdas + args.lambda_tvs, started)


def _gather_patches(manifest_rows, feature_set, dyes, need_labels: bool):
    cubes = {}
    features, labels, meta = [], [], []
    for image, label, cx, cy in manifest_rows:
        if need_labels and label is None:
            raise CliError(f"manifest row for {image} lacks a label")
        if image not in cubes:
            cubes[image] = imagery.load_cube(_require(image))
        try:
            vec = analysis.patch_feature_vector(cubes[image], (cx, cy), feature_set, dyes)
        except ValueError as exc:
            raise CliError(f"{image} ({cx},{cy}): {exc}") from exc
        features.append(vec)
        labels.append(label)
        meta.append((image, cx, cy))
    return features, labels, meta


def cmd_classify_train(args) -> None:
    started = time.monotonic()
    rows = analysis.load_patch_manifest(_require(args.manifest))
    dyes = args.dyes.split(",") if args.dyes else None
    features, labels, _ = _gather_patches(rows, args.features, dyes, need_labels=True)
    model = analysis.lda_train(features, labels,
                               feature_names=analysis.feature_names(args.features, dyes))
    out = Path(args.out)
    analysis.save_model(model, out)
    _write_manifest(out, "classify-train", [args.manifest], [out], model.to_json(), started)


def cmd_classify_predict(args) -> None:
    started = time.monotonic()
    model = analysis.load_model(_require(args.model))
    rows = analysis.load_patch_manifest(_require(args.manifest))
    dyes = args.dyes.split(",") if args.dyes else None
    features, labels, meta = _gather_patches(rows, args.features, dyes, need_labels=False)
    predictions = []
    for vec, (image, cx, cy) in zip(features, meta):
        label, score = analysis.lda_predict(model, vec)
        predictions.append({"image": image, "cx": cx, "cy": cy,
                            "label": label, "score": score})
    report = {"predictions": predictions, "metrics": None}
    if all(lab is not None for lab in labels) and labels:
        report["metrics"] = analysis.classification_report(
            [p["label"] for p in predictions], labels
        )
    out = Path(args.out)
    atomic_write_text(out, json.dumps(report, sort_keys=True) + "\n")
    _write_manifest(out, "classify-predict", [args.manifest, args.model], [out],
                    model.to_json(), started)


def cmd_render_srgb(args) -> None:
    started = time.monotonic()
    cube = imagery.load_cube(_require(args.cube))
    light = _light_for(cube, args.light)
    if cube.role == imagery.ROLE_OPTICAL_DENSITY:
        planes = light.values[:, None, None] * 10.0 ** (-cube.planes)
        cube = imagery.SpectralCube(planes=planes, role=imagery.ROLE_INTENSITY,
                                    wavelengths_nm=cube.wavelengths_nm)
    rendered = imagery.render_srgb(cube, light)
    arr = np.rint(np.clip(rendered.planes, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    out = Path(args.out)
    atomic_write_bytes(out, buf.getvalue())
    _write_manifest(out, "render-srgb", [args.cube], [out], "{}", started)


# ---------------------------------------------------------------------------
# Parser.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="papsmix",
        description="Papanicolaou four-dye stain unmixing toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate-matrix", help="measure a stain matrix from single-stain regions")
    p.add_argument("images", nargs="+")
    p.add_argument("--regions", required=True)
    p.add_argument("--light", default=None, help="comma-separated incident intensities")
    p.add_argument("--linearize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate_matrix)

    p = sub.add_parser("unmix", help="unmix an RGB image into four dye abundances")
    p.add_argument("image")
    p.add_argument("--matrix", required=True)
    p.add_argument("--method", choices=solver.METHODS, default="proposed")
    p.add_argument("--config", default=None)
    p.add_argument("--light", default=None)
    p.add_argument("--linearize", action="store_true")
    p.add_argument("--calibration", default=None, help="calibration JSON providing heatmap scales")
    p.add_argument("--raw", action="store_true", help="keep negative cd abundances")
    p.add_argument("--no-heatmaps", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unmix)

    p = sub.add_parser("ms-unmix", help="pseudoinverse unmixing of a multispectral cube")
    p.add_argument("cube")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ms_unmix)

    p = sub.add_parser("calibrate", help="fit per-dye MS/RGB calibration coefficients")
    p.add_argument("--ms-matrix", required=True)
    p.add_argument("--rgb-matrix", required=True)
    p.add_argument("--samples", required=True, help="JSON list of single-stain sample pairs")
    p.add_argument("--reference", default=None, help="abundance cube for robust-max q values")
    p.add_argument("--percentile", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="score an estimate against ground truth")
    p.add_argument("gt")
    p.add_argument("est")
    p.add_argument("--calibration", default=None)
    p.add_argument("--apply-p", action="store_true")
    p.add_argument("--apply-q", action="store_true")
    p.add_argument("--image", default=None)
    p.add_argument("--method", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="generate a synthetic specimen")
    p.add_argument("--spec", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("benchmark", help="score all methods over phantom seeds")
    p.add_argument("--spec", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    p.add_argument("--methods", default="cd,sunsal,sunsal_tv,proposed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("sweep", help="SRE grid over regularization weights")
    p.add_argument("--spec", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--method", choices=[m for m in solver.METHODS if m != "cd"],
                   default="proposed")
    p.add_argument("--lambdas", required=True)
    p.add_argument("--lambda-tvs", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("classify", help="train or apply the patch classifier")
    csub = p.add_subparsers(dest="classify_command", required=True)
    pt = csub.add_parser("train")
    pt.add_argument("--manifest", required=True)
    pt.add_argument("--features", choices=analysis.FEATURE_SETS, default="relative")
    pt.add_argument("--dyes", default=None, help="dye subset for relative features")
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_classify_train)
    pp = csub.add_parser("predict")
    pp.add_argument("--manifest", required=True)
    pp.add_argument("--model", required=True)
    pp.add_argument("--features", choices=analysis.FEATURE_SETS, default="relative")
    pp.add_argument("--dyes", default=None)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_classify_predict)

    p = sub.add_parser("render-srgb", help="render a 14-band cube to an sRGB PNG")
    p.add_argument("cube")
    p.add_argument("--light", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_srgb)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - unexpected failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
