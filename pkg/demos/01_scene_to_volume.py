"""From a synthetic scene to a dense feature volume, one step at a time.

    python demos/01_scene_to_volume.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from geoprior import io
from geoprior.camera import PointCloud, back_project, crop, farthest_point_sample
from geoprior.config import TrainConfig
from geoprior.data import make_scene
from geoprior.model import GeometryModel

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/scene")
out.mkdir(parents=True, exist_ok=True)
cfg = TrainConfig()

# a two-primitive scene seen by the 8-camera ring
scene = make_scene(cfg, 0)
for p in scene.spec.primitives:
    print(p.shape, np.round(p.center, 3), np.round(p.size, 3))
print("views:", len(scene.observations), "fused GT points:", len(scene.gt))
for v, ob in enumerate(scene.observations[:2]):
    io.write_ppm(out / f"view_{v}.ppm", ob.rgb)
    print(f"view {v}: {np.mean(ob.depth > 0):.1%} of pixels hit a surface")
io.write_ply(out / "gt_full.ply", scene.gt)

# the network only sees view 0: lift it, crop to the workspace, thin it out
ob = scene.observations[0]
cloud = back_project(ob)
inside = crop(cloud, cfg["network.scene_bounds"])
sparse = farthest_point_sample(inside, cfg["network.fps_sample_num"])
print(f"back-projected {len(cloud)} -> cropped {len(inside)} -> FPS {len(sparse)}")

# voxelize with pixel features and fuse into the dense volume
model = GeometryModel(cfg.model_config(), seed=0)
grid = model.input_grid(ob)
print("occupied cells:", int((grid.occupancy[:, 0] > 0).sum()), "of", grid.occupancy.shape[0])
fwd = model(grid)
print("volume", fwd.volume.values.shape, "stages", [s.shape for s in fwd.stages])
io.heatmap_slices(fwd.volume.values.data, fwd.volume.resolution, out / "volume")
for i, s in enumerate(fwd.stages):
    io.write_ply(out / f"stage_{i}.ply", PointCloud(s.data))
print("wrote", out)
