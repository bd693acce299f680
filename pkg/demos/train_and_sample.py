"""Train a small flow-matching model on a toy city and look at what it makes.

Takes a couple of minutes on one core. The model never sees raw GPS fixes:
each trip becomes K normalized keypoints plus a condition (departure time,
OD zones, mode, summary stats). Sampling integrates the learned vector
field with 10 Euler steps and then places the path between OD points
predicted by the auxiliary head.
"""

import numpy as np

from trajflow.conditioning import ConditionSpec
from trajflow.flow import generate_batch
from trajflow.geo import polyline_length_km
from trajflow.metrics import dataset_bbox, density_js, evaluate
from trajflow.model import TrainConfig, prepare
from trajflow.synth import make_world, sample_dataset
from trajflow.training import train

world = make_world(0, "urban")
trips = sample_dataset(world, 1500, np.random.default_rng([0, 1]))
held = sample_dataset(world, 300, np.random.default_rng([0, 2]), prefix="h")

data, stats = prepare(trips[:1350], 10, world.grid)
val, _ = prepare(trips[1350:], 10, world.grid, stats)

cfg = TrainConfig(epochs=40, lr=1e-3, plateau_patience=10, width=128, blocks=4)
res = train(data, val, cfg, world.grid.n_zones,
            progress=lambda r: r["epoch"] % 10 == 0 and print(f"epoch {r['epoch']:3d}  "
                                                               f"train {r['train_loss']:.4f}  val {r['val_loss']:.4f}"))

specs = [ConditionSpec.from_trajectory(t) for t in held]
gen = generate_batch(res.model, stats, specs, rng=np.random.default_rng(5))

report = evaluate(held, gen)
print(f"\ndensity JS {report.density_js:.3f}, median DTW to nearest real {report.dtw['median']:.2f} km")
print(f"JS on a shared 64x64 grid: {density_js(held, gen, dataset_bbox(held)):.3f}")

print("\nmean trip length by mode (km)")
for mode in ("TRAIN", "CAR", "OTHER", "BIKE", "WALK"):
    real = [polyline_length_km(t.latlon) for t in held if t.mode.name == mode]
    fake = [polyline_length_km(t.latlon) for t in gen if t.mode.name == mode]
    if real:
        print(f"  {mode:>5}: real {np.mean(real):6.2f}   generated {np.mean(fake):6.2f}")

inside = np.mean([world.grid.contains(s.origin_zone, t.latlon[0]) and world.grid.contains(s.destination_zone, t.latlon[-1])
                  for s, t in zip(specs, gen)])
print(f"\n{inside:.1%} of samples start and end in their requested zones")
