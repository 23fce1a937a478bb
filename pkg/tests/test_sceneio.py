"""File-format and synthetic-data tests.

Round-trip contracts are checked at byte level (write, read, write, compare).
The densify volume oracle is an independent voxel count computed here; synth
noise statistics are checked against the configured standard deviation.
"""

import json
import math

import numpy as np
import pytest

from mpmtwin.core import (
    MaterialParams,
    ObservationFrame,
    ObservationSet,
    ValidationError,
    look_at_camera,
)
from mpmtwin.kernel import rollout
from mpmtwin.sceneio import (
    densify,
    load_scene,
    material_to_doc,
    parse_occlusion,
    read_observations,
    read_points_text,
    read_report,
    read_trajectory,
    save_scene,
    synth_generate,
    write_observations,
    write_points_text,
    write_report,
    write_trajectory,
)


def base_doc(**overrides):
    doc = {
        "grid": {"origin": [0.0, 0.0, 0.0], "dx": 0.05, "dims": [13, 13, 13]},
        "dt": 2e-4, "substeps_per_frame": 4, "frames": 3,
        "gravity": [0.0, 0.0, -2.0],
        "material": {"E": 1e6, "nu": 0.3, "rho": 1200.0, "y": "inf"},
        "particles": {"source": "box", "lo": [0.22, 0.22, 0.22],
                      "hi": [0.38, 0.38, 0.38], "spacing": 0.08,
                      "jitter": 0.01, "seed": 3},
        "loss_weights": {"dist": 1.0, "track": 1.0, "mask": 0.0},
    }
    doc.update(overrides)
    return doc


def write_doc(tmp_path, doc, name="scene.json"):
    path = tmp_path / name
    save_scene(path, doc)
    return path


class TestSceneFiles:
    def test_valid_document_loads(self, tmp_path):
        doc = base_doc(
            material={"E": 1e6, "nu": 0.3, "rho": 1200.0, "y": 2e4,
                      "frozen": ["rho", "y"], "bounds": {"E": [1e4, 1e7]}},
            ground={"height": 0.05, "friction_mu": 0.4},
            controllers=[{"shape": "sphere", "radius": 0.04,
                          "motion": {"times": [0.0, 0.0024],
                                     "poses": [[0.3, 0.3, 0.45],
                                               [0.3, 0.3, 0.44]]}}],
            optimizer={"method": "cma-es", "max_iterations": 7, "seed": 5},
            online={"optimize_every": 2, "horizon": 4},
        )
        loaded = load_scene(write_doc(tmp_path, doc))
        scene = loaded.scene
        assert scene.particles.n == 8
        assert scene.material.yield_stress == 2e4
        assert scene.material.friction_mu == 0.4     # from the ground block
        assert scene.ground is not None and scene.ground.height == 0.05
        assert len(scene.controllers) == 1
        assert scene.controllers[0].steps == scene.n_steps
        assert loaded.method == "cma-es"
        assert loaded.optimizer.max_iterations == 7
        assert loaded.online.optimize_every == 2
        assert loaded.frozen == ("density", "yield_stress")
        assert loaded.bounds == {"youngs_modulus": (1e4, 1e7)}

    def test_infinite_yield_string(self, tmp_path):
        loaded = load_scene(write_doc(tmp_path, base_doc()))
        assert loaded.scene.material.is_elastic

    def test_unknown_top_level_key_rejected(self, tmp_path):
        doc = base_doc()
        doc["gravityy"] = [0, 0, 0]
        with pytest.raises(ValidationError, match="gravityy"):
            load_scene(write_doc(tmp_path, doc))

    @pytest.mark.parametrize("mutate, needle", [
        (lambda d: d["material"].update(youngs=1.0), "youngs"),
        (lambda d: d["grid"].update(spacing=0.1), "spacing"),
        (lambda d: d["particles"].update(radius=1.0), "radius"),
        (lambda d: d["loss_weights"].update(chamfer=1.0), "chamfer"),
    ])
    def test_unknown_nested_key_rejected(self, tmp_path, mutate, needle):
        doc = base_doc()
        mutate(doc)
        with pytest.raises(ValidationError, match=needle):
            load_scene(write_doc(tmp_path, doc))

    def test_missing_required_key_named(self, tmp_path):
        doc = base_doc()
        del doc["dt"]
        with pytest.raises(ValidationError, match="'dt'"):
            load_scene(write_doc(tmp_path, doc))

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{ not json")
        with pytest.raises(ValidationError, match="not valid JSON"):
            load_scene(path)

    def test_unknown_particle_source(self, tmp_path):
        doc = base_doc(particles={"source": "mesh", "path": "x"})
        with pytest.raises(ValidationError, match="mesh"):
            load_scene(write_doc(tmp_path, doc))

    def test_unknown_frozen_name(self, tmp_path):
        doc = base_doc()
        doc["material"]["frozen"] = ["stiffness"]
        with pytest.raises(ValidationError, match="stiffness"):
            load_scene(write_doc(tmp_path, doc))

    def test_bad_controller_pose_shape(self, tmp_path):
        doc = base_doc(controllers=[{"shape": "capsule", "radius": 0.02,
                                     "motion": {"times": [0.0, 0.0024],
                                                "poses": [[0.3, 0.3, 0.45],
                                                          [0.3, 0.3, 0.44]]}}])
        with pytest.raises(ValidationError, match="poses"):
            load_scene(write_doc(tmp_path, doc))

    def test_ball_source(self, tmp_path):
        doc = base_doc(particles={"source": "ball", "center": [0.3, 0.3, 0.3],
                                  "radius": 0.08, "spacing": 0.03})
        loaded = load_scene(write_doc(tmp_path, doc))
        x = loaded.scene.particles.x
        assert x.shape[0] > 8
        assert np.all(np.linalg.norm(x - 0.3, axis=1) <= 0.08 + 1e-12)

    def test_file_source_densifies(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = 0.3 + 0.05 * rng.uniform(-1.0, 1.0, (200, 3))
        write_points_text(tmp_path / "cloud.xyz", pts)
        doc = base_doc(particles={"source": "file", "path": "cloud.xyz",
                                  "target_spacing": 0.02,
                                  "velocity": [0.1, 0.0, 0.0]})
        loaded = load_scene(write_doc(tmp_path, doc))
        state = loaded.scene.particles
        assert state.n % 8 == 0 and state.n > 0
        np.testing.assert_array_equal(state.v[:, 0], 0.1)

    def test_validation_can_be_deferred(self, tmp_path):
        doc = base_doc()
        doc["grid"]["dims"] = [4, 4, 4]          # too small for the margin rule
        path = write_doc(tmp_path, doc)
        with pytest.raises(ValidationError):
            load_scene(path)
        loaded = load_scene(path, validate=False)
        assert loaded.scene.grid_dims[0] == 4

    def test_canonical_save_round_trip(self, tmp_path):
        path = write_doc(tmp_path, base_doc())
        doc = json.loads(path.read_text())
        path2 = tmp_path / "again.json"
        save_scene(path2, doc)
        assert path.read_bytes() == path2.read_bytes()

    def test_material_to_doc_inf(self):
        doc = material_to_doc(MaterialParams(1e6, 0.3, 1200.0))
        assert doc["y"] == "inf"
        assert doc["E"] == 1e6


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("scene")
    doc = base_doc(
        cameras=[{"position": [0.3, -0.6, 0.45], "target": [0.3, 0.3, 0.3],
                  "fx": 20.0, "fy": 20.0, "cx": 7.5, "cy": 7.5,
                  "width": 16, "height": 16}],
        controllers=[{"shape": "sphere", "radius": 0.04,
                      "motion": {"times": [0.0, 0.0024],
                                 "poses": [[0.3, 0.3, 0.45],
                                           [0.3, 0.3, 0.44]]}}],
    )
    return load_scene(write_doc(tmp, doc)).scene


class TestObservationFiles:
    def make_obs(self, scene, **synth_kw):
        synth_kw.setdefault("noise", 1e-4)
        synth_kw.setdefault("subsample", 0.9)
        synth_kw.setdefault("tracked_fraction", 0.5)
        synth_kw.setdefault("seed", 7)
        return synth_generate(scene, scene.material, **synth_kw)

    def assert_sets_equal(self, a, b):
        assert len(a.frames) == len(b.frames)
        assert len(a.cameras) == len(b.cameras)
        for ca, cb in zip(a.cameras, b.cameras):
            assert ca == cb
        for fa, fb in zip(a.frames, b.frames):
            assert fa.frame == fb.frame
            assert np.array_equal(fa.points, fb.points)
            if fa.tracked_ids is None:
                assert fb.tracked_ids is None
            else:
                assert np.array_equal(fa.tracked_ids, fb.tracked_ids)
                assert np.array_equal(fa.tracked_points, fb.tracked_points)
                assert np.array_equal(fa.tracked_valid, fb.tracked_valid)
            if fa.masks is None:
                assert fb.masks is None
            else:
                for ma, mb in zip(fa.masks, fb.masks):
                    assert np.array_equal(ma, mb)
            if fa.controller_poses is None:
                assert fb.controller_poses is None
            else:
                for pa, pb in zip(fa.controller_poses, fb.controller_poses):
                    assert (pa is None) == (pb is None)
                    if pa is not None:
                        assert np.array_equal(pa, pb)

    @pytest.mark.parametrize("text", [False, True])
    def test_round_trip_bit_identical(self, small_scene, tmp_path, text):
        obs = self.make_obs(small_scene)
        p1 = tmp_path / "a.mpmobs"
        p2 = tmp_path / "b.mpmobs"
        write_observations(p1, obs, text=text)
        back = read_observations(p1)
        self.assert_sets_equal(obs, back)
        write_observations(p2, back, text=text)
        assert p1.read_bytes() == p2.read_bytes()

    def test_none_fields_survive(self, tmp_path):
        frames = [ObservationFrame(frame=1, points=np.zeros((2, 3))),
                  ObservationFrame(frame=2, points=np.ones((3, 3)),
                                   controller_poses=[None,
                                                     np.array([[0.0, 1.0, 2.0],
                                                               [3.0, 4.0, 5.0]])])]
        obs = ObservationSet(frames=frames)
        path = tmp_path / "sparse.mpmobs"
        write_observations(path, obs)
        back = read_observations(path)
        self.assert_sets_equal(obs, back)
        assert back.frames[0].tracked_ids is None
        assert back.frames[1].controller_poses[0] is None
        assert back.frames[1].controller_poses[1].shape == (2, 3)

    def test_empty_set_round_trips(self, tmp_path):
        path = tmp_path / "empty.mpmobs"
        write_observations(path, ObservationSet(frames=[]))
        assert len(read_observations(path).frames) == 0

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTOBS0\n{}\n")
        with pytest.raises(ValidationError, match="bad magic"):
            read_observations(path)

    def test_truncated_file_rejected(self, small_scene, tmp_path):
        obs = self.make_obs(small_scene)
        path = tmp_path / "full.mpmobs"
        write_observations(path, obs)
        data = path.read_bytes()
        cut = tmp_path / "cut.mpmobs"
        cut.write_bytes(data[:len(data) - 40])
        with pytest.raises(ValidationError, match="truncated"):
            read_observations(cut)


class TestTrajectoryFiles:
    def test_round_trip_exact(self, small_scene, tmp_path):
        result = rollout(small_scene)
        path = tmp_path / "run.mpmtrj"
        write_trajectory(path, result.positions, dt=small_scene.dt,
                         substeps_per_frame=small_scene.substeps_per_frame)
        trj = read_trajectory(path)
        assert trj.frames == small_scene.frames
        assert trj.n_particles == small_scene.particles.n
        assert trj.dt == small_scene.dt
        assert trj.substeps_per_frame == small_scene.substeps_per_frame
        assert np.array_equal(trj.positions, result.positions)
        path2 = tmp_path / "run2.mpmtrj"
        write_trajectory(path2, trj.positions, dt=trj.dt,
                         substeps_per_frame=trj.substeps_per_frame)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.mpmtrj"
        path.write_bytes(b"WRONGMAG\n{}\n")
        with pytest.raises(ValidationError, match="bad magic"):
            read_trajectory(path)

    def test_truncated(self, small_scene, tmp_path):
        result = rollout(small_scene)
        path = tmp_path / "run.mpmtrj"
        write_trajectory(path, result.positions, dt=small_scene.dt,
                         substeps_per_frame=4)
        cut = tmp_path / "cut.mpmtrj"
        cut.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValidationError, match="truncated"):
            read_trajectory(cut)


class TestReports:
    def test_round_trip_and_determinism(self, tmp_path):
        records = [{"record": "iteration", "loss": 1.5, "params": {"E": 1e6}},
                   {"record": "result", "best_loss": 0.25, "aborted": False}]
        p1 = tmp_path / "a.jsonl"
        p2 = tmp_path / "b.jsonl"
        write_report(p1, records)
        assert read_report(p1) == records
        write_report(p2, read_report(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_non_finite_values_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_report(tmp_path / "bad.jsonl", [{"loss": math.inf}])


class TestDensify:
    def test_volume_equals_independent_voxel_count(self):
        # unit-cube surface cloud
        rng = np.random.default_rng(4)
        face = rng.uniform(0.0, 1.0, (4000, 2))
        sides = []
        for axis in range(3):
            for level in (0.0, 1.0):
                pts = np.insert(face[rng.choice(4000, 600, replace=False)],
                                axis, level, axis=1)
                sides.append(pts)
        cloud = np.concatenate(sides)
        spacing = 0.05
        state = densify(cloud, spacing, 800.0, seed=0)
        voxel = 2.0 * spacing
        occupied = {tuple(k) for k in np.floor(cloud / voxel).astype(np.int64)}
        expected_volume = len(occupied) * voxel ** 3
        assert state.v0.sum() == pytest.approx(expected_volume, rel=1e-12)
        assert state.m.sum() == pytest.approx(800.0 * expected_volume, rel=1e-12)
        assert state.n == 8 * len(occupied)

    def test_samples_stay_in_their_voxel(self):
        rng = np.random.default_rng(1)
        cloud = rng.uniform(-0.5, 0.5, (100, 3))
        spacing = 0.04
        state = densify(cloud, spacing, 1000.0, seed=2)
        voxel = 2.0 * spacing
        occupied = {tuple(k) for k in np.floor(cloud / voxel).astype(np.int64)}
        sample_keys = {tuple(k) for k in np.floor(state.x / voxel).astype(np.int64)}
        assert sample_keys == occupied

    def test_single_point_warns_and_fills_one_voxel(self):
        with pytest.warns(UserWarning, match="single voxel"):
            state = densify(np.array([[0.3, 0.3, 0.3]]), 0.05, 1000.0)
        assert state.n == 8

    def test_deterministic_per_seed(self):
        cloud = np.random.default_rng(9).uniform(0, 1, (50, 3))
        a = densify(cloud, 0.05, 1000.0, seed=3)
        b = densify(cloud, 0.05, 1000.0, seed=3)
        c = densify(cloud, 0.05, 1000.0, seed=4)
        assert np.array_equal(a.x, b.x)
        assert not np.array_equal(a.x, c.x)

    def test_bad_inputs(self):
        with pytest.raises(ValidationError):
            densify(np.zeros((0, 3)), 0.05, 1000.0)
        with pytest.raises(ValidationError):
            densify(np.zeros((4, 3)), -0.1, 1000.0)
        with pytest.raises(ValidationError):
            densify(np.zeros((4, 3)), 0.05, 0.0)


class TestOcclusionRules:
    def test_all_rule(self):
        f0, f1, pred = parse_occlusion("all@7")
        assert (f0, f1) == (7, 7)
        assert pred(np.zeros((5, 3))).all()

    def test_halfspace_rule(self):
        f0, f1, pred = parse_occlusion("z<0.25@3:6")
        assert (f0, f1) == (3, 6)
        pts = np.array([[0, 0, 0.1], [0, 0, 0.3], [0, 0, 0.25]])
        np.testing.assert_array_equal(pred(pts), [True, False, False])
        _, _, above = parse_occlusion("x>1.5@2")
        np.testing.assert_array_equal(
            above(np.array([[2.0, 0, 0], [1.0, 0, 0]])), [True, False])

    @pytest.mark.parametrize("bad", ["q<3@1", "z<@2", "all@5:2", "z<0.2", "@3"])
    def test_bad_rules_rejected(self, bad):
        with pytest.raises(ValidationError):
            parse_occlusion(bad)


class TestSynthGenerate:
    def test_clean_settings_reproduce_rollout_exactly(self, small_scene):
        obs = synth_generate(small_scene, small_scene.material,
                             noise=0.0, subsample=1.0, tracked_fraction=0.25,
                             seed=0)
        truth = rollout(small_scene)
        assert len(obs.frames) == small_scene.frames
        for f, fr in enumerate(obs.frames, start=1):
            assert np.array_equal(fr.points, truth.positions[f])
            assert np.array_equal(fr.tracked_points,
                                  truth.positions[f][fr.tracked_ids])

    def test_subsample_count_and_fixed_subset(self, small_scene):
        obs = synth_generate(small_scene, small_scene.material,
                             subsample=0.5, tracked_fraction=0.0, seed=1)
        n = small_scene.particles.n
        k = round(0.5 * n)
        assert all(fr.points.shape == (k, 3) for fr in obs.frames)
        assert all(fr.tracked_ids is None for fr in obs.frames)

    def test_noise_statistics(self):
        # static block, many particles: enough samples to estimate sigma
        from mpmtwin.core import Scene, particles_from_box
        material = MaterialParams(1e6, 0.3, 1200.0)
        state = particles_from_box((0.22, 0.22, 0.22), (0.38, 0.38, 0.38),
                                   0.02, material.density)
        scene = Scene(grid_origin=(0, 0, 0), grid_dx=0.05,
                      grid_dims=(13, 13, 13), dt=2e-4, substeps_per_frame=2,
                      frames=10, gravity=(0, 0, 0), material=material,
                      particles=state)
        sigma = 1e-3
        obs = synth_generate(scene, material, noise=sigma, subsample=1.0,
                             tracked_fraction=0.0, seed=11)
        truth = rollout(scene)
        diffs = np.concatenate([fr.points - truth.positions[f]
                                for f, fr in enumerate(obs.frames, start=1)])
        assert diffs.shape[0] >= 5000
        for axis in range(3):
            assert abs(np.std(diffs[:, axis]) - sigma) < 0.05 * sigma

    def test_occlusion_hides_frames(self, small_scene):
        obs = synth_generate(small_scene, small_scene.material,
                             tracked_fraction=0.5, occlusion=("all@2",), seed=7)
        assert obs.frames[0].tracked_valid.all()
        assert not obs.frames[1].tracked_valid.any()
        assert obs.frames[2].tracked_valid.all()

    def test_halfspace_occlusion_matches_predicate(self, small_scene):
        truth = rollout(small_scene)
        obs = synth_generate(small_scene, small_scene.material, noise=0.0,
                             tracked_fraction=1.0, occlusion=("z<0.3@1:3",),
                             seed=2)
        for f, fr in enumerate(obs.frames, start=1):
            hidden = truth.positions[f][fr.tracked_ids][:, 2] < 0.3
            np.testing.assert_array_equal(fr.tracked_valid, ~hidden)

    def test_masks_and_poses_attached(self, small_scene, tmp_path):
        obs = synth_generate(small_scene, small_scene.material, seed=3)
        for fr in obs.frames:
            assert len(fr.masks) == 1
            assert fr.masks[0].shape == (16, 16)
            assert fr.masks[0].dtype == bool
            assert len(fr.controller_poses) == 1
            assert fr.controller_poses[0].shape == (3,)
        assert len(obs.cameras) == 1

    def test_deterministic_per_seed(self, small_scene, tmp_path):
        a = synth_generate(small_scene, small_scene.material, noise=1e-4, seed=5)
        b = synth_generate(small_scene, small_scene.material, noise=1e-4, seed=5)
        pa, pb = tmp_path / "a.mpmobs", tmp_path / "b.mpmobs"
        write_observations(pa, a)
        write_observations(pb, b)
        assert pa.read_bytes() == pb.read_bytes()

    def test_bad_arguments(self, small_scene):
        with pytest.raises(ValidationError):
            synth_generate(small_scene, small_scene.material, subsample=0.0)
        with pytest.raises(ValidationError):
            synth_generate(small_scene, small_scene.material, noise=-1.0)
        with pytest.raises(ValidationError):
            synth_generate(small_scene, small_scene.material,
                           tracked_fraction=1.5)
