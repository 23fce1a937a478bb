"""Drop a soft elastic block onto the ground and watch it land.

This is the smallest end-to-end tour of the simulator: build a scene directly
from the library types (no scene file), roll it forward, inspect the motion,
and round-trip the trajectory through the binary .trj format.

Run from the repository root:

    python3 demos/01_bouncing_block.py
"""

from pathlib import Path

import numpy as np

from mpmtwin.core import GroundPlane, MaterialParams, Scene, particles_from_box
from mpmtwin.kernel import rollout
from mpmtwin.sceneio import read_trajectory, write_trajectory

OUT_DIR = Path(__file__).parent / "out"


def main():
    # A 10 cm cube of soft rubber-like material, 23 cm above the floor.
    material = MaterialParams(youngs_modulus=2e5, poissons_ratio=0.3,
                              density=1000.0, friction_mu=0.4)
    block = particles_from_box([0.325, 0.325, 0.35], [0.425, 0.425, 0.45],
                               spacing=0.02, density=material.density,
                               jitter=0.3, seed=0)
    scene = Scene(grid_origin=[0.0, 0.0, 0.0], grid_dx=0.05,
                  grid_dims=[16, 16, 16], dt=2.5e-4, substeps_per_frame=16,
                  frames=150, gravity=[0.0, 0.0, -9.81], material=material,
                  particles=block, ground=GroundPlane(height=0.12))
    scene.validate()
    print(f"{block.n} particles, {scene.n_steps} substeps "
          f"({scene.frames * scene.substeps_per_frame * scene.dt:.2f} s)")

    res = rollout(scene)

    # Centre-of-mass height and kinetic energy tell the story: free fall,
    # impact, a partial rebound, then rest on the plane.
    m = block.m
    print(f"\n{'frame':>5s} {'t [s]':>6s} {'com z [m]':>9s}")
    for k in range(0, scene.frames + 1, 15):
        com_z = float(np.average(res.positions[k, :, 2], weights=m))
        t = k * scene.substeps_per_frame * scene.dt
        print(f"{k:5d} {t:6.2f} {com_z:9.4f}")

    com_z = np.average(res.positions[:, :, 2], axis=1, weights=m)
    k_floor = int(np.argmin(com_z))
    rebound = float(com_z[k_floor:].max() - com_z[k_floor])
    print(f"\nlowest at frame {k_floor}, rebound height {rebound * 100:.1f} cm")
    ke = 0.5 * float(np.sum(m * np.sum(res.final_state.v ** 2, axis=1)))
    print(f"final kinetic energy {ke:.2e} J (settled)")

    # Trajectories serialize to a compact binary format.
    OUT_DIR.mkdir(exist_ok=True)
    out = OUT_DIR / "bounce.trj"
    write_trajectory(out, res.positions, dt=scene.dt,
                     substeps_per_frame=scene.substeps_per_frame)
    back = read_trajectory(out)
    assert np.array_equal(back.positions, res.positions)
    print(f"wrote and re-read {out} ({out.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
