"""Write the synthetic toy scene (two boxes on a floor) as a labeled PLY cloud.

Run once before the toy training run:
    uv run python scripts/make_toy_scene.py toy.ply
"""

import sys
from pathlib import Path

from jsenet.ply import write_cloud
from jsenet.synthetic import toy_scene


def main():
    print("=== JSENet toy scene ===\n")

    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("toy.ply")
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

    if not out.parent.exists():
        print(f"Error: directory '{out.parent}' does not exist.")
        sys.exit(2)

    cloud = toy_scene(seed)
    write_cloud(out, cloud)

    counts = {int(k): int((cloud.labels == k).sum()) for k in sorted(set(cloud.labels.tolist()))}
    print(f"Wrote {len(cloud)} points to: {out}")
    print(f"Points per class: {counts}")
    print(f"\nTrain with: jsenet train {out} --num-classes 3 --sphere-radius 1.2 (see README for the toy flags)")


if __name__ == "__main__":
    main()
