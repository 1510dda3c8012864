"""
Comparing reconstruction methods
================================

The linear model, each nonlinear model applied everywhere, and the gated
model are scored with spectral angle, RMSE and relative RMSE. The command
line tool drives the same pipeline from files.
"""

import tempfile
from pathlib import Path

from regimix import cli, regime

out = Path(tempfile.mkdtemp())
scene_dir = out / "scene"

# regimix synth --out <dir> --rows 32 --cols 32 --bands 30 --seed 5
cli.main(["synth", "--out", str(scene_dir), "--rows", "32", "--cols", "32", "--bands", "30", "--seed", "5"])

# regimix eval --scene <dir> --epochs 300
cli.main(["eval", "--scene", str(scene_dir), "--epochs", "300"])
print((scene_dir / "metrics.csv").read_text())

# regimix unmix writes every map plus a manifest that can be fed back as --config.
cli.main(["unmix", "--cube", str(scene_dir / "cube.hdr"), "--endmembers", str(scene_dir / "endmembers.csv"),
          "--out", str(out / "maps"), "--epochs", "300"])
print(sorted(p.name for p in (out / "maps").iterdir())[:8], "...")
print((out / "maps" / "manifest.txt").read_text().splitlines()[0])
