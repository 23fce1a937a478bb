"""Track a streamed observation sequence and correct the twin in flight.

A pinned elastic span sags under gravity while two grippers stretch it.
The observations come from a rollout at E = 5e4 Pa, but the digital twin
believes E = 5e5 Pa -- ten times too stiff. Replaying the stream with
in-flight correction enabled, the twin compares a short lookahead against
each incoming observation, nudges the modulus whenever the scene is
quasi-static (the gate skips frames with fast motion, where inertia would
corrupt the correction), and hot-swaps the new parameters into the running
state. The same stream replayed with correction disabled shows what the
mismatched twin alone would do.

Run from the repository root:

    python3 demos/04_online_twin.py
"""

import time
from dataclasses import replace

import numpy as np

from mpmtwin import presets
from mpmtwin.core import material_from_normalized
from mpmtwin.identify import online_loop
from mpmtwin.sceneio import synth_generate

E_TRUE = presets.ROPE_TRUE["E"]


def tail_means(records):
    tail = records[-(len(records) // 4):]
    return (float(np.mean([r.loss_dist for r in tail])),
            float(np.mean([r.loss_mask for r in tail])))


def main():
    loaded = presets.build(presets.rope_doc())
    scene = loaded.scene
    print(f"twin believes E = {scene.material.youngs_modulus:g} Pa, "
          f"stream was recorded at {E_TRUE:g} Pa")

    stream = synth_generate(scene,
                            replace(scene.material, youngs_modulus=E_TRUE),
                            tracked_fraction=0.0, seed=7)
    print(f"stream: {len(stream.frames)} frames, "
          f"{stream.frames[0].masks[0].shape} silhouette masks\n")

    results = {}
    for tag, config in (("disabled", replace(loaded.online, optimize_every=0)),
                        ("enabled", loaded.online)):
        t0 = time.perf_counter()
        res = online_loop(scene, stream, config=config, frozen=loaded.frozen,
                          bounds=loaded.bounds)
        elapsed = time.perf_counter() - t0
        results[tag] = res
        dist, mask = tail_means(res.records)
        print(f"correction {tag:8s} {elapsed:5.1f}s  "
              f"final-quarter point loss {dist:.3e}  "
              f"silhouette loss {mask:.3e}  swaps {res.swaps}")

    print("\nenabled run, every 20th frame "
          "(G = gated as non-quasi-static, O = corrected):")
    for r in results["enabled"].records[::20]:
        flags = ("G" if r.gated else "") + ("O" if r.optimized else "")
        e_here = material_from_normalized(r.params,
                                          scene.material).youngs_modulus
        print(f"  frame {r.frame:3d}  point loss {r.loss_dist:.2e}  "
              f"mean speed {r.speed:5.3f} m/s  E {e_here:8.3g}  {flags}")
    final_e = results["enabled"].final_material.youngs_modulus
    print(f"\nfinal corrected E = {final_e:.3g} Pa (true {E_TRUE:g} Pa)")
    print("the correction optimizes tracking, not parameter accuracy: with "
          "one low-resolution\ncamera and a sparse point cloud, softer moduli "
          "than the truth can fit the stream\nbetter; what the ablation "
          "guarantees is the tracking gap shown above")


if __name__ == "__main__":
    main()
