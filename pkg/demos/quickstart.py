"""End-to-end tour on a pocket-sized scene, via the command line interface.

Generates a synthetic driving world, fits the semantic field for a couple
hundred steps, renders a future view, discretizes the field to a voxel
grid, and scores it against ground truth.  Finishes in a few minutes on a
laptop core; outputs land in demos/out/quickstart.
"""

import pathlib
import subprocess
import sys

OUT = pathlib.Path(__file__).parent / "out" / "quickstart"

SCENE = [
    "--set", "scene.dims=[32,32,12]",
    "--set", "scene.num_steps=16",
    "--set", "scene.speed=1.2",
    "--set", "rig.image_width=32",
    "--set", "rig.image_height=24",
]
TRAIN = [
    "--set", "train.steps=200",
    "--set", "train.lr=0.001",
    "--set", "train.side_offset_range=[4,15]",
    "--set", "train.forward_offset=3",
    "--set", "train.patches_per_image=4",
    "--set", "render.num_samples=8",
    "--set", "render.stochastic=true",
]


def run(*args):
    cmd = [sys.executable, "-m", "semfield.cli", *args]
    print("+", " ".join(str(a) for a in cmd[2:]))
    subprocess.run(cmd, check=True)


def main():
    gen, fit, ren, vox, ev = (OUT / n for n in ("gen", "fit", "render", "vox", "eval"))

    # the dataset: posed stereo+side images, noisy labels, exact GT grid
    run("gen", *SCENE, "--out", gen)

    # fit the field to the images (no 3D supervision anywhere)
    run("fit", *SCENE, *TRAIN, "--out", fit)

    # look through the field from 10 steps into the future
    run("render", *SCENE, *TRAIN, "--checkpoint", fit / "checkpoint.s4cp",
        "--cam", "front_left", "--t", "10", "--out", ren)

    # discretize and score
    run("voxelize", *SCENE, *TRAIN, "--checkpoint", fit / "checkpoint.s4cp",
        "--out", vox)
    run("eval", *SCENE, "--pred", vox / "pred.s4cg", "--gt", gen / "gt.s4cg",
        "--out", ev)

    print(f"\nartifacts in {OUT}")
    print(f"  open {ren / 'seg.pgm'} next to {gen / 't0010_front_left_gtseg.pgm'}")
    print(f"  {vox / 'pred.ply'} loads in any mesh viewer")


if __name__ == "__main__":
    main()
