import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from papsmix import imagery
from papsmix.phantom import PhantomSpec, generate
from papsmix.solver import SolverConfig

SMALL_SPEC = PhantomSpec(
    width=32, height=32, n_cells=2,
    nucleus_radius_px=(2.5, 3.5), cytoplasm_radius_px=(6.0, 8.0),
)
FAST_CONFIG = SolverConfig(1e-3, 1e-3, mu=0.02, max_iters=80, tol=1e-7,
                           weight_mode="nucleus_exp")


def run_cli(*args, env=None):
    return subprocess.run(
        [sys.executable, "-m", "papsmix", *[str(a) for a in args]],
        capture_output=True, text=True, env=env,
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Phantom run directory plus small config/spec files."""
    root = tmp_path_factory.mktemp("cliws")
    spec_path = root / "phantom.json"
    spec_path.write_text(SMALL_SPEC.to_json())
    cfg_path = root / "config.json"
    cfg_path.write_text(FAST_CONFIG.to_json())
    out = root / "run"
    proc = run_cli("phantom", "--spec", spec_path, "--out", out)
    assert proc.returncode == 0, proc.stderr
    return {"root": root, "spec": spec_path, "config": cfg_path, "phantom": out}


class TestPhantomCommand:
    def test_outputs_exist(self, workspace):
        out = workspace["phantom"]
        for name in ("truth.msc", "ms_od.msc", "rgb_od.msc", "mask.png",
                     "ms_matrix.csv", "rgb_matrix.csv", "phantom.json",
                     "run_manifest.json"):
            assert (out / name).exists(), name

    def test_manifest_fields(self, workspace):
        manifest = json.loads((workspace["phantom"] / "run_manifest.json").read_text())
        assert manifest["command"] == "phantom"
        assert manifest["tool_version"]
        assert "config_sha256" in manifest and "wall_time_s" in manifest


class TestUnmixCommand:
    def test_proposed_with_config(self, workspace):
        out = workspace["root"] / "unmix_proposed"
        proc = run_cli("unmix", workspace["phantom"] / "rgb_od.msc",
                       "--matrix", workspace["phantom"] / "rgb_matrix.csv",
                       "--method", "proposed", "--config", workspace["config"],
                       "--out", out)
        assert proc.returncode == 0, proc.stderr
        cube = imagery.load_cube(out / "abundance.msc")
        assert cube.planes.shape == (4, 32, 32)
        assert cube.planes.min() >= 0.0
        assert (out / "solver_report.json").exists()
        for dye in ("EY", "H", "LG", "OG"):
            assert (out / f"abundance_{dye}.png").exists()

    def test_cd_needs_no_config(self, workspace):
        out = workspace["root"] / "unmix_cd"
        proc = run_cli("unmix", workspace["phantom"] / "rgb_od.msc",
                       "--matrix", workspace["phantom"] / "rgb_matrix.csv",
                       "--method", "cd", "--out", out)
        assert proc.returncode == 0, proc.stderr
        assert not (out / "solver_report.json").exists()

    def test_default_config_is_shipped_tuning(self, workspace):
        import hashlib

        from papsmix.solver import METHOD_CONFIGS

        out = workspace["root"] / "unmix_defaults"
        proc = run_cli("unmix", workspace["phantom"] / "rgb_od.msc",
                       "--matrix", workspace["phantom"] / "rgb_matrix.csv",
                       "--method", "proposed", "--out", out)
        assert proc.returncode == 0, proc.stderr
        manifest = json.loads((out / "run_manifest.json").read_text())
        expected = hashlib.sha256(
            METHOD_CONFIGS["proposed"].to_json().encode()
        ).hexdigest()
        assert manifest["config_sha256"] == expected

    def test_png_input_roundtrip(self, workspace):
        render = workspace["root"] / "view.png"
        proc = run_cli("render-srgb", workspace["phantom"] / "ms_od.msc",
                       "--out", render)
        assert proc.returncode == 0, proc.stderr
        out = workspace["root"] / "unmix_png"
        proc = run_cli("unmix", render,
                       "--matrix", workspace["phantom"] / "rgb_matrix.csv",
                       "--method", "cd", "--out", out)
        assert proc.returncode == 0, proc.stderr
        cube = imagery.load_cube(out / "abundance.msc")
        assert cube.planes.shape == (4, 32, 32)

    def test_missing_matrix_exits_2(self, workspace, tmp_path):
        proc = run_cli("unmix", workspace["phantom"] / "rgb_od.msc",
                       "--matrix", tmp_path / "nope.csv",
                       "--method", "cd", "--out", tmp_path / "o")
        assert proc.returncode == 2
        assert proc.stderr.strip().startswith("error:")
        assert len(proc.stderr.strip().splitlines()) == 1


class TestMsUnmixCommand:
    def test_runs(self, workspace):
        out = workspace["root"] / "msux"
        proc = run_cli("ms-unmix", workspace["phantom"] / "ms_od.msc",
                       "--matrix", workspace["phantom"] / "ms_matrix.csv",
                       "--out", out)
        assert proc.returncode == 0, proc.stderr
        cube = imagery.load_cube(out / "abundance.msc")
        assert cube.role == "abundance"


class TestEvaluateCommand:
    def test_identity_pair_zero_rmse(self, workspace):
        out = workspace["root"] / "eval.csv"
        truth = workspace["phantom"] / "truth.msc"
        proc = run_cli("evaluate", truth, truth, "--out", out)
        assert proc.returncode == 0, proc.stderr
        with out.open() as fh:
            row = list(csv.DictReader(fh))[0]
        assert float(row["rmse"]) == 0.0
        assert row["sre_db"] == "inf"

    def test_matches_metrics_module(self, workspace, tmp_path):
        from papsmix.metrics import evaluate
        from papsmix.solver import cd_unmix

        truth = generate(SMALL_SPEC)
        est = cd_unmix(truth.rgb_od.planes, truth.rgb_matrix)
        est_path = tmp_path / "est.msc"
        imagery.save_cube(est.to_cube(), est_path)
        gt_path = workspace["phantom"] / "truth.msc"
        out = tmp_path / "row.csv"
        proc = run_cli("evaluate", gt_path, est_path, "--out", out)
        assert proc.returncode == 0, proc.stderr
        with out.open() as fh:
            row = list(csv.DictReader(fh))[0]
        # compare on the stored float32 cubes, exactly what the command reads
        expected = evaluate(imagery.load_cube(gt_path).planes,
                            imagery.load_cube(est_path).planes)
        assert float(row["sre_db"]) == expected.sre_db
        assert float(row["rmse"]) == expected.rmse
        assert float(row["sre_H"]) == expected.per_dye_sre_db[1]

    def test_shape_mismatch_fails(self, workspace, tmp_path):
        other = generate(PhantomSpec(width=16, height=16, n_cells=1,
                                     nucleus_radius_px=(2.0, 2.5),
                                     cytoplasm_radius_px=(4.0, 5.0)))
        imagery.save_cube(other.abundance.to_cube(), tmp_path / "small.msc")
        proc = run_cli("evaluate", workspace["phantom"] / "truth.msc",
                       tmp_path / "small.msc", "--out", tmp_path / "r.csv")
        assert proc.returncode == 2
        assert "mismatch" in proc.stderr


@pytest.fixture(scope="module")
def single_stain_images(tmp_path_factory):
    root = tmp_path_factory.mktemp("singles")
    truth = generate(SMALL_SPEC)
    coeffs = truth.rgb_matrix.coeffs
    paths = []
    for i, dye in enumerate(("EY", "H", "LG", "OG")):
        od = coeffs[:, i : i + 1, None] * np.linspace(0.2, 1.5, 64).reshape(1, 8, 8)
        cube = imagery.SpectralCube(planes=od, role="optical_density")
        path = root / f"{dye}.msc"
        imagery.save_cube(cube, path)
        paths.append(path)
    regions = [{"dye": dye, "x": 0, "y": 0, "w": 8, "h": 8, "image": i}
               for i, dye in enumerate(("EY", "H", "LG", "OG"))]
    regions_path = root / "regions.json"
    regions_path.write_text(json.dumps(regions))
    return {"paths": paths, "regions": regions_path, "coeffs": coeffs, "root": root}


class TestEstimateMatrixCommand:
    def test_recovers_matrix(self, single_stain_images):
        out = single_stain_images["root"] / "matrix.csv"
        proc = run_cli("estimate-matrix", *single_stain_images["paths"],
                       "--regions", single_stain_images["regions"], "--out", out)
        assert proc.returncode == 0, proc.stderr
        from papsmix.stainlib import load_matrix_csv
        matrix = load_matrix_csv(out)
        assert np.allclose(matrix.coeffs, single_stain_images["coeffs"], atol=1e-9)

    def test_missing_dye_named(self, single_stain_images, tmp_path):
        partial = tmp_path / "partial.json"
        partial.write_text(json.dumps(
            [{"dye": "EY", "x": 0, "y": 0, "w": 8, "h": 8, "image": 0}]
        ))
        proc = run_cli("estimate-matrix", *single_stain_images["paths"],
                       "--regions", partial, "--out", tmp_path / "m.csv")
        assert proc.returncode == 2
        assert "H" in proc.stderr


class TestCalibrateCommand:
    def test_unity_coefficients(self, workspace, tmp_path):
        truth = generate(SMALL_SPEC)
        samples = []
        for i, dye in enumerate(("EY", "H", "LG", "OG")):
            ramp = np.linspace(0.2, 1.5, 32).reshape(1, 4, 8)
            ms = imagery.SpectralCube(planes=truth.ms_matrix.coeffs[:, i:i+1, None] * ramp,
                                      role="optical_density")
            rgb = imagery.SpectralCube(planes=truth.rgb_matrix.coeffs[:, i:i+1, None] * ramp,
                                       role="optical_density")
            imagery.save_cube(ms, tmp_path / f"ms_{dye}.msc")
            imagery.save_cube(rgb, tmp_path / f"rgb_{dye}.msc")
            samples.append({"dye": dye, "ms": str(tmp_path / f"ms_{dye}.msc"),
                            "rgb": str(tmp_path / f"rgb_{dye}.msc")})
        samples_path = tmp_path / "samples.json"
        samples_path.write_text(json.dumps(samples))
        out = tmp_path / "cal.json"
        proc = run_cli("calibrate",
                       "--ms-matrix", workspace["phantom"] / "ms_matrix.csv",
                       "--rgb-matrix", workspace["phantom"] / "rgb_matrix.csv",
                       "--samples", samples_path,
                       "--reference", workspace["phantom"] / "truth.msc",
                       "--out", out)
        assert proc.returncode == 0, proc.stderr
        cal = json.loads(out.read_text())
        assert np.allclose(cal["p"], 1.0, atol=1e-9)
        assert len(cal["q"]) == 4 and min(cal["q"]) > 0


class TestSweepCommand:
    def test_grid_rows(self, workspace):
        out = workspace["root"] / "sweep.csv"
        proc = run_cli("sweep", "--spec", workspace["spec"],
                       "--method", "sunsal",
                       "--lambdas", "0.01,0.1", "--lambda-tvs", "0.0,0.001",
                       "--out", out)
        assert proc.returncode == 0, proc.stderr
        lines = out.read_text().splitlines()
        assert lines[0] == "lambda_sparse,lambda_tv,sre_db"
        assert len(lines) == 5


class TestBenchmarkCommand:
    def test_rows_and_summary(self, workspace):
        out = workspace["root"] / "bench"
        proc = run_cli("benchmark", "--spec", workspace["spec"],
                       "--methods", "cd,proposed", "--seeds", "2", "--out", out)
        assert proc.returncode == 0, proc.stderr
        lines = (out / "benchmark.csv").read_text().splitlines()
        assert len(lines) == 5  # header + 2 seeds x 2 methods
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == {"cd", "proposed"}


@pytest.fixture(scope="module")
def patch_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("classify")
    spec = PhantomSpec(
        width=48, height=48, n_cells=4, seed=3,
        nucleus_radius_px=(2.0, 3.0), cytoplasm_radius_px=(6.0, 7.5),
        noise_snr_db=40.0,
    )
    truth = generate(spec)
    cube_path = root / "abundance.msc"
    imagery.save_cube(truth.abundance.to_cube(), cube_path)
    rows = ["image,label,cx,cy"]
    from papsmix.phantom import MASK_EC_CYTOPLASM, MASK_LEGH_CYTOPLASM
    rng = np.random.default_rng(0)
    for code, label in ((MASK_EC_CYTOPLASM, "EC"), (MASK_LEGH_CYTOPLASM, "LEGH")):
        ys, xs = np.where(truth.labels_mask == code)
        inside = (xs >= 2) & (xs < 46) & (ys >= 2) & (ys < 46)
        pick = rng.choice(np.flatnonzero(inside), size=12, replace=False)
        rows.extend(f"{cube_path},{label},{xs[i]},{ys[i]}" for i in pick)
    manifest = root / "patches.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return {"root": root, "manifest": manifest}


class TestClassifyCommands:
    def test_train_and_predict(self, patch_setup):
        model_path = patch_setup["root"] / "model.json"
        proc = run_cli("classify", "train", "--manifest", patch_setup["manifest"],
                       "--features", "relative", "--dyes", "EY,OG",
                       "--out", model_path)
        assert proc.returncode == 0, proc.stderr
        model = json.loads(model_path.read_text())
        assert model["features"] == ["EY_rel", "OG_rel"]
        assert len(model["weights"]) == 2

        report_path = patch_setup["root"] / "report.json"
        proc = run_cli("classify", "predict", "--manifest", patch_setup["manifest"],
                       "--model", model_path, "--features", "relative",
                       "--dyes", "EY,OG", "--out", report_path)
        assert proc.returncode == 0, proc.stderr
        report = json.loads(report_path.read_text())
        assert report["metrics"]["accuracy"] == 1.0


class TestRenderCommand:
    def test_renders_ms_cube(self, workspace):
        out = workspace["root"] / "render.png"
        proc = run_cli("render-srgb", workspace["phantom"] / "ms_od.msc", "--out", out)
        assert proc.returncode == 0, proc.stderr
        cube = imagery.load_cube(out)
        assert cube.planes.shape[0] == 3


def test_solver_output_independent_of_thread_count(workspace):
    import os

    outputs = []
    for threads in ("1", "4"):
        env = dict(os.environ, OMP_NUM_THREADS=threads, OPENBLAS_NUM_THREADS=threads)
        out = workspace["root"] / f"omp{threads}"
        proc = run_cli("unmix", workspace["phantom"] / "rgb_od.msc",
                       "--matrix", workspace["phantom"] / "rgb_matrix.csv",
                       "--method", "proposed", "--config", workspace["config"],
                       "--out", out, env=env)
        assert proc.returncode == 0, proc.stderr
        outputs.append((out / "abundance.msc").read_bytes())
    assert outputs[0] == outputs[1]


def test_papsmix_threads_env_caps_jobs(workspace):
    import os

    env = dict(os.environ, PAPSMIX_THREADS="1")
    out = workspace["root"] / "capped"
    proc = run_cli("benchmark", "--spec", workspace["spec"], "--methods", "cd",
                   "--seeds", "2", "--jobs", "8", "--out", out, env=env)
    assert proc.returncode == 0, proc.stderr
    assert (out / "benchmark.csv").exists()


def test_version_flag():
    proc = run_cli("--version")
    assert proc.returncode == 0
    assert proc.stdout.strip()
