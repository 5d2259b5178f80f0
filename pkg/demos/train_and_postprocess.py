"""Train a small multi-tap model on synthetic faces and compare scores with and without post-processing.

Takes under a minute on one CPU core.
"""
import logging

from mtaffect.data import SyntheticSpec, align_dataset, synthesize
from mtaffect.pipeline import PostProcessing
from mtaffect.trainer import TrainConfig, evaluate, train
from mtaffect.zoo import HeadSpec, ModelGraph, toy_backbone

logging.basicConfig(level=logging.INFO, format="%(message)s")
logging.getLogger("mtaffect.geometry").setLevel(logging.ERROR)

ds = align_dataset(synthesize(SyntheticSpec(seed=0, n_videos=12)))
print(f"{len(ds.utterances)} utterances, {len(ds.frames)} frames, splits "
      f"{ {k: len(v) for k, v in ds.splits.items()} }")

cfg = TrainConfig(epochs=6, eval_train=False)
model = ModelGraph(toy_backbone(ds.extent, ds.channels), HeadSpec("parallel-krnn", rnn_units=32, fc_units=64),
                   ["pool1", "pool3", "fc"], cfg.seq_len, seed=0)
print(model.label, f"{model.parameter_count()} parameters")

result = train(model, ds, cfg)
print(f"best epoch {result.best_epoch}: validation mean CCC {result.best_val_ccc:.3f}")

post = PostProcessing("median", window_v=5, window_a=5, smooth_min_frames=4, smooth_alpha=0.5)
ev = evaluate(model, ds, "test", post, mode="auto-gate", gate_split="validation")
print("\ngate decisions on the validation split:")
for entry in ev.gate_log:
    print(f"  {entry['step']:<34} {entry['before']:.3f} -> {entry['after']:.3f}  kept={entry['kept']}")
print("\ntest split, CCC with post-processing (without):")
for k, v in ev.table_row().items():
    print(f"  {k:<8} {v}")
