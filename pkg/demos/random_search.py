"""
Random search over loss weighting and learning rate
===================================================

Samples a fraction of a small lambda x lr x batch grid, trains a fresh toy
model per trial and keeps the best validation F1.
"""

import tempfile
from pathlib import Path

from sackit import SearchSpace, TrainConfig, build_toy_segmenter, load_split
from sackit.primitives import ToySegmenterSpec
from sackit.recipes import make_desk_data
from sackit.search import enumerate_grid, run_search

root = Path(tempfile.mkdtemp(prefix="sackit-search-"))
spec = ToySegmenterSpec()
manifests = make_desk_data(root / "data", sizes={"train": 60, "val": 20, "test": 1})
train_set = load_split(manifests["train"], spec.input_size)
val_set = load_split(manifests["val"], spec.input_size)

# %%
space = SearchSpace.from_dict({
    "loss": "weighted_hybrid",
    "lambda": ["0.5:0.25:1.0"],
    "lr": [0.0005, 0.001, 0.002],
    "batch": [2, 4],
    "epochs": 2,
    "fraction": 0.25,
    "seed": 0,
})
print(f"grid of {len(enumerate_grid(space))}, sampling a quarter")

# %%
result = run_search(space, lambda: build_toy_segmenter(spec, seed=0), train_set, val_set,
                    TrainConfig(), out_dir=root / "trials", log=print)
print(f"\nbest: {result.best.config.label()}  val F1 {result.best.val_f1:.4f}")
print((root / "trials" / "trials.csv").read_text())
