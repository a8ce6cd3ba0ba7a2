"""Calibration sweep for the directional layer-weight property (scratch)."""
import sys
import time
import numpy as np
import layertap as lt
from layertap import tasks as tasks_mod

pretrain_steps = int(sys.argv[1])
noise = float(sys.argv[2])
offset = float(sys.argv[3])
steps = int(sys.argv[4])
speakers = int(sys.argv[5]) if len(sys.argv) > 5 else 4

tasks_mod._SPEAKER_OFFSET_SCALE = offset
tap = lt.TapConfig(variant="full", embed_dim=16, bottleneck_dim=8)

t0 = time.perf_counter()
rows = {}
for kind in ("frame_content", "utterance_speaker"):
    for seed in (0, 1, 2):
        task = lt.SyntheticTaskSpec(kind=kind, num_train=48, num_eval=16, noise=noise,
                                    num_classes=speakers)
        rc = lt.RunConfig(backbone=lt.TOY, strategy=lt.tap_only(tap), task=task,
                          steps=steps, lr=1e-3, batch_size=8, seeds=(seed,),
                          pretrain_steps=pretrain_steps)
        rep = lt.train(rc, seed=seed)
        rows[(kind, seed)] = rep
        print(f"  {kind} s{seed}: centroid={rep.weight_centroid:.4f} "
              f"w={[round(w,3) for w in rep.layer_weights]} "
              f"m {rep.initial_metric:.3f}->{rep.final_metric:.3f}", flush=True)

wins = sum(
    rows[("frame_content", s)].weight_centroid > rows[("utterance_speaker", s)].weight_centroid
    for s in (0, 1, 2)
)
print(f"RESULT pretrain={pretrain_steps} noise={noise} offset={offset} steps={steps} "
      f"spk={speakers}: content>speaker in {wins}/3 seeds "
      f"({time.perf_counter()-t0:.0f}s)")
