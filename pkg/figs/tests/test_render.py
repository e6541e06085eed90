"""Figure rendering against real (tiny) solver runs, via the CLI boundary."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from flowfigs import ExportError, FigureSpec, KINDS, render

TINY_COMMON = {
    "dt": 0.025,
    "n_tau": 1,
    "integrator": "euler",
    "outer_steps": 3,
    "learning_rate": 1e-4,
    "tolerance": 1e-12,
    "resample_every": None,
    "batch_size": 25,
    "max_iterations": 6,
    "seed": 1,
    "network_layers": 2,
    "network_width": 8,
    "init_mode": "scaled-normal",
    "reinit_each_step": False,
}


def make_run(tmp_path: Path, preset: str, **extra) -> Path:
    """Produce a run directory through the solver's own CLI."""
    doc = dict(TINY_COMMON, preset=preset, **extra)
    cfg = tmp_path / f"{preset}.json"
    cfg.write_text(json.dumps(doc))
    out = tmp_path / f"run-{preset}"
    for args in (["run", str(cfg), "--out", str(out)], ["export", str(out), "all"]):
        proc = subprocess.run(
            [sys.executable, "-m", "jkoflow.cli", *args], capture_output=True, text=True
        )
        assert proc.returncode == 0, proc.stderr
    return out


@pytest.fixture(scope="module")
def fp_run(tmp_path_factory):
    return make_run(tmp_path_factory.mktemp("fp"), "fokker-planck-kl")


@pytest.fixture(scope="module")
def porous_run(tmp_path_factory):
    return make_run(
        tmp_path_factory.mktemp("pm"), "porous-medium", dt=0.001, n_tau=2, integrator="rk4"
    )


@pytest.fixture(scope="module")
def kalman_run(tmp_path_factory):
    return make_run(tmp_path_factory.mktemp("kw"), "kalman-wasserstein", dt=0.5)


class TestAllKinds:
    def test_every_kind_renders(self, fp_run, porous_run, kalman_run):
        by_kind = {
            "scatter-density": fp_run,
            "trajectories-3d": fp_run,
            "energy-curve": fp_run,
            "side-profile": fp_run,
            "support-ring-overlay": porous_run,
            "contour-overlay": kalman_run,
        }
        assert set(by_kind) == set(KINDS)
        for kind, run_dir in by_kind.items():
            res = render(FigureSpec(kind=kind, run_dir=str(run_dir)))
            assert res.path.exists() and res.path.stat().st_size > 0, kind

    def test_energy_curve_point_count_equals_k(self, fp_run):
        res = render(FigureSpec(kind="energy-curve", run_dir=str(fp_run)))
        assert res.meta["points"] == TINY_COMMON["outer_steps"]

    def test_ring_radius_equals_manifest_value_exactly(self, porous_run):
        manifest = json.loads((porous_run / "manifest.json").read_text())
        res = render(FigureSpec(kind="support-ring-overlay", run_dir=str(porous_run), steps=(0, 3)))
        assert res.meta["ring_radius"] == [
            manifest["extras"]["support_radius"][0],
            manifest["extras"]["support_radius"][3],
        ]

    def test_filenames_derive_from_spec_hash(self, fp_run, tmp_path):
        spec = FigureSpec(kind="energy-curve", run_dir=str(fp_run))
        a = render(spec, out_dir=tmp_path)
        b = render(spec, out_dir=tmp_path)
        assert a.path == b.path
        other = render(FigureSpec(kind="energy-curve", run_dir=str(fp_run), dpi=60), out_dir=tmp_path)
        assert other.path != a.path

    def test_inputs_not_mutated(self, fp_run):
        before = {p.name: p.stat().st_mtime_ns for p in fp_run.iterdir() if p.is_file()}
        render(FigureSpec(kind="scatter-density", run_dir=str(fp_run)))
        after = {p.name: p.stat().st_mtime_ns for p in fp_run.iterdir() if p.is_file()}
        assert before == after


class TestErrors:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown figure kind"):
            FigureSpec(kind="pie-chart", run_dir=".")

    def test_missing_export_no_file_written(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 1}))
        with pytest.raises(ExportError):
            render(FigureSpec(kind="energy-curve", run_dir=str(tmp_path)))
        assert not (tmp_path / "figures").exists()

    def test_empty_energy_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 1}))
        (tmp_path / "energy.csv").write_text("step,t,energy\n")
        with pytest.raises(ExportError, match="empty"):
            render(FigureSpec(kind="energy-curve", run_dir=str(tmp_path)))

    def test_schema_mismatch_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 1}))
        (tmp_path / "energy.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ExportError, match="schema"):
            render(FigureSpec(kind="energy-curve", run_dir=str(tmp_path)))

    def test_ring_requires_manifest_radii(self, fp_run):
        with pytest.raises(ExportError, match="support_radius"):
            render(FigureSpec(kind="support-ring-overlay", run_dir=str(fp_run)))

    def test_missing_steps_rejected(self, fp_run):
        with pytest.raises(ExportError, match="not present"):
            render(FigureSpec(kind="scatter-density", run_dir=str(fp_run), steps=(99,)))


class TestCli:
    def test_cli_renders_selected_kind(self, fp_run, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "flowfigs.cli", str(fp_run), "--kind", "energy-curve", "--out", str(tmp_path)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert "energy-curve" in proc.stdout

    def test_cli_reports_failures(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 1}))
        proc = subprocess.run(
            [sys.executable, "-m", "flowfigs.cli", str(tmp_path), "--kind", "energy-curve"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1
        assert "flowfigs: error:" in proc.stderr
