"""Command-line interface: subcommands, exit codes, determinism, diagnostics."""

import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from mpmtwin import presets
from mpmtwin.cli import main
from mpmtwin.kernel import get_default_workers
from mpmtwin.sceneio import (read_observations, read_report, read_trajectory,
                             save_scene, synth_generate)


def tiny_doc(**extra):
    """A 20-particle, 30-substep scene that exercises every CLI path fast."""
    doc = presets.gradcheck_doc(plastic=False)
    doc["frames"], doc["substeps_per_frame"] = 6, 5
    doc["optimizer"] = {"method": "gradient", "lr": 0.02, "max_iterations": 2,
                        "seed": 0, "cma_population": 4, "cma_sigma0": 0.1,
                        "checkpoint_stride": 5}
    doc["material"]["frozen"] = ["nu", "rho"]
    doc["material"]["bounds"] = {"E": [1e4, 3e6]}
    doc.update(extra)
    return doc


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Scene + observations shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene.json"
    save_scene(scene, tiny_doc())
    obs = root / "truth.obs"
    rc = main(["synth", str(scene), "--theta", "E=1.4e6", "--tracked", "0.25",
               "--seed", "7", "--out", str(obs)])
    assert rc == 0
    return {"root": root, "scene": scene, "obs": obs}


class TestSimulate:
    def test_writes_readable_trajectory(self, work, tmp_path, capsys):
        out = tmp_path / "run.trj"
        assert main(["simulate", str(work["scene"]), "--out", str(out)]) == 0
        traj = read_trajectory(out)
        assert traj.positions.shape == (7, 20, 3)
        assert traj.substeps_per_frame == 5
        assert "wrote" in capsys.readouterr().out

    def test_deterministic_invocations_are_bit_identical(self, work, tmp_path):
        a, b = tmp_path / "a.trj", tmp_path / "b.trj"
        assert main(["simulate", str(work["scene"]), "--deterministic",
                     "--out", str(a)]) == 0
        assert main(["simulate", str(work["scene"]), "--deterministic",
                     "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestSynth:
    def test_theta_matches_direct_generation(self, work, tmp_path):
        loaded = presets.build(tiny_doc())
        mat = replace(loaded.scene.material, youngs_modulus=1.4e6)
        direct = tmp_path / "direct.obs"
        from mpmtwin.sceneio import write_observations
        write_observations(direct, synth_generate(
            loaded.scene, mat, tracked_fraction=0.25, seed=7))
        assert direct.read_bytes() == work["obs"].read_bytes()

    def test_occlusion_and_text_flags(self, work, tmp_path):
        out = tmp_path / "occ.obs"
        assert main(["synth", str(work["scene"]), "--occlude", "all@2",
                     "--tracked", "0.25", "--text", "--out", str(out)]) == 0
        frames = read_observations(out).frames
        assert not frames[1].tracked_valid.any()
        assert frames[0].tracked_valid.all()

    @pytest.mark.parametrize("theta", ["Q=3", "E:1e5", "E=abc"])
    def test_bad_theta_exits_1(self, work, tmp_path, capsys, theta):
        rc = main(["synth", str(work["scene"]), "--theta", theta,
                   "--out", str(tmp_path / "x.obs")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("mpmtwin: validation-error:")
        assert err.count("\n") == 1


class TestIdentify:
    def test_gradient_report(self, work, tmp_path):
        out = tmp_path / "fit.jsonl"
        assert main(["identify", str(work["scene"]), str(work["obs"]),
                     "--method", "grad", "--out", str(out)]) == 0
        records = read_report(out)
        summary = records[-1]
        assert summary["type"] == "summary"
        assert summary["method"] == "grad"
        assert summary["iterations"] == 2
        assert summary["aborted"] is False
        assert isinstance(summary["wall_time"], float)
        assert set(summary["best_params"]) == {"E", "nu", "rho", "y"}
        assert summary["best_params"]["y"] == "inf"
        its = [r for r in records if r["type"] == "iteration"]
        assert [r["iteration"] for r in its] == [0, 1]
        assert its[0]["params"]["E"] == 1e6
        # frozen parameters never move
        assert all(r["params"]["nu"] == 0.3 for r in its)

    def test_max_iterations_override_and_cmaes(self, work, tmp_path):
        out = tmp_path / "cma.jsonl"
        assert main(["identify", str(work["scene"]), str(work["obs"]),
                     "--method", "cmaes", "--max-iterations", "3",
                     "--out", str(out)]) == 0
        summary = read_report(out)[-1]
        assert summary["method"] == "cmaes"
        assert summary["iterations"] == 3

    def test_deterministic_reports_identical_with_null_wall_time(
            self, work, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for path in (a, b):
            assert main(["identify", str(work["scene"]), str(work["obs"]),
                         "--method", "grad", "--deterministic",
                         "--out", str(path)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert read_report(a)[-1]["wall_time"] is None

    def test_mismatched_observations_exit_1(self, work, tmp_path, capsys):
        long_doc = tiny_doc()
        long_doc["frames"] = 9
        for ctrl in long_doc["controllers"]:
            ctrl["motion"]["times"].append(0.009)
            ctrl["motion"]["poses"].append(ctrl["motion"]["poses"][-1])
        long_scene = tmp_path / "long.json"
        save_scene(long_scene, long_doc)
        long_obs = tmp_path / "long.obs"
        assert main(["synth", str(long_scene), "--out", str(long_obs)]) == 0
        rc = main(["identify", str(work["scene"]), str(long_obs),
                   "--out", str(tmp_path / "r.jsonl")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("mpmtwin: validation-error:")


@pytest.fixture(scope="module")
def stream_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("online")
    doc = tiny_doc(online={"optimize_every": 2, "horizon": 4,
                           "speed_threshold": 1e9, "lr": 0.05,
                           "iterations": 1, "checkpoint_stride": 2})
    doc["cameras"] = [{"position": [0.34, 1.0, 0.32],
                       "target": [0.34, 0.32, 0.32],
                       "fx": 24.0, "fy": 24.0, "cx": 8.0, "cy": 8.0,
                       "width": 16, "height": 16}]
    doc["loss_weights"] = {"dist": 1.0, "track": 0.0, "mask": 0.5}
    scene = root / "scene.json"
    save_scene(scene, doc)
    obs = root / "stream.obs"
    assert main(["synth", str(scene), "--theta", "E=1.4e6", "--tracked",
                 "0", "--out", str(obs)]) == 0
    return scene, obs


class TestOnline:
    def test_report_structure(self, stream_scene, tmp_path):
        scene, obs = stream_scene
        out = tmp_path / "online.jsonl"
        assert main(["online", str(scene), str(obs), "--out", str(out)]) == 0
        records = read_report(out)
        frames = [r for r in records if r["type"] == "frame"]
        summary = records[-1]
        assert [r["frame"] for r in frames] == list(range(1, 7))
        assert summary["frames"] == 6
        assert summary["swaps"] >= 1
        assert all(isinstance(r["loss_mask"], float) for r in frames)
        optimized = [r for r in frames if r["optimized"]]
        assert optimized and all(r["attempted"] for r in optimized)
        assert isinstance(summary["wall_time"], float)

    def test_deterministic_byte_identical(self, stream_scene, tmp_path):
        scene, obs = stream_scene
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for path in (a, b):
            assert main(["online", str(scene), str(obs), "--deterministic",
                         "--out", str(path)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert read_report(a)[-1]["wall_time"] is None


class TestGradcheck:
    def test_passes_at_default_tolerance(self, work, capsys):
        rc = main(["gradcheck", str(work["scene"]), str(work["obs"])])
        out = capsys.readouterr().out
        assert rc == 0
        lines = out.splitlines()
        assert lines[0].startswith("objective ")
        body = "\n".join(lines[1:])
        for token in ("E", "nu", "rho", "ok", "max rel err"):
            assert token in body
        # nu and rho are frozen in the fixture scene; y is elastic-frozen
        assert body.count("frozen") == 3

    def test_tight_tolerance_exits_3(self, work, capsys):
        rc = main(["gradcheck", str(work["scene"]), str(work["obs"]),
                   "--tol", "1e-12"])
        assert rc == 3
        err = capsys.readouterr().err
        assert err.startswith("mpmtwin: gradcheck-tolerance:")
        assert err.count("\n") == 1


class TestDiagnosticsAndExitCodes:
    def test_missing_file_exits_1(self, tmp_path, capsys):
        rc = main(["simulate", str(tmp_path / "absent.json"),
                   "--out", str(tmp_path / "x.trj")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("mpmtwin: io-error:")
        assert err.count("\n") == 1

    def test_invalid_scene_exits_1(self, tmp_path, capsys):
        doc = tiny_doc()
        doc["gravityy"] = [0, 0, 0]
        bad = tmp_path / "bad.json"
        save_scene(bad, doc)
        rc = main(["simulate", str(bad), "--out", str(tmp_path / "x.trj")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("mpmtwin: validation-error:")
        assert "gravityy" in err

    def test_numerical_fault_exits_2(self, tmp_path, capsys):
        doc = tiny_doc()
        doc["material"]["E"] = 1e4  # soft, so the advisory time-step bound holds
        doc["particles"]["velocity"] = [60.0, 0.0, 0.0]  # escapes the grid
        doc["controllers"] = []
        bad = tmp_path / "fault.json"
        save_scene(bad, doc)
        rc = main(["simulate", str(bad), "--out", str(tmp_path / "x.trj")])
        assert rc == 2
        err = capsys.readouterr().err
        assert err.startswith("mpmtwin: numerical-fault:")
        assert err.count("\n") == 1

    def test_usage_error_exits_1(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["identify"])  # missing positionals
        assert exc.value.code == 1
        assert capsys.readouterr().err.startswith("mpmtwin: usage-error:")

    def test_thread_env_var(self, work, tmp_path, monkeypatch):
        monkeypatch.setenv("MPMTWIN_THREADS", "2")
        assert main(["simulate", str(work["scene"]),
                     "--out", str(tmp_path / "t.trj")]) == 0
        assert get_default_workers() == 2
        # --deterministic wins over the environment
        assert main(["simulate", str(work["scene"]), "--deterministic",
                     "--out", str(tmp_path / "t2.trj")]) == 0
        assert get_default_workers() == 0

    def test_thread_env_var_invalid_exits_1(self, work, tmp_path,
                                            monkeypatch, capsys):
        monkeypatch.setenv("MPMTWIN_THREADS", "many")
        rc = main(["simulate", str(work["scene"]),
                   "--out", str(tmp_path / "x.trj")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("mpmtwin: validation-error:")

    def test_module_entry_point(self, work, tmp_path):
        out = tmp_path / "sub.trj"
        proc = subprocess.run(
            [sys.executable, "-m", "mpmtwin.cli", "simulate",
             str(work["scene"]), "--out", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert out.exists()
