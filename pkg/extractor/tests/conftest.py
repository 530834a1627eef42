import atexit
import warnings

import numpy as np
import pytest
import torch

# A SWIG-built extension deep in the transformers import chain emits
# spurious DeprecationWarnings at import and again at interpreter
# shutdown; neither involves code under test.
warnings.filterwarnings(
    "ignore", message=r"builtin type \w+ has no __module__ attribute"
)
atexit.register(
    warnings.filterwarnings,
    "ignore",
    message=r"builtin type \w+ has no __module__ attribute",
)
with warnings.catch_warnings():
    warnings.simplefilter("ignore", DeprecationWarning)
    from transformers import CLIPVisionConfig, CLIPVisionModel
    from transformers.utils import logging as hf_logging

from treeutil import save_mask, save_rgb

hf_logging.disable_progress_bar()
hf_logging.set_verbosity_error()

# Small enough to run the full dual-branch forward in milliseconds:
# 28px images tile into a 2x2 grid of 14px patches, hidden width 32.
TINY_CONFIG = dict(
    hidden_size=32,
    intermediate_size=64,
    num_hidden_layers=2,
    num_attention_heads=4,
    image_size=28,
    patch_size=14,
    num_channels=3,
)


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    torch.manual_seed(1234)
    model = CLIPVisionModel(CLIPVisionConfig(**TINY_CONFIG))
    out = tmp_path_factory.mktemp("tiny_vision_model")
    model.save_pretrained(out)
    return out


@pytest.fixture()
def mvtec_root(tmp_path):
    """Two categories, 3 good + 2 crack each; one crack image lacks a mask."""
    rng = np.random.default_rng(7)
    root = tmp_path / "mvtec"
    for cat in ("gizmo", "widget"):
        good = root / cat / "test" / "good"
        crack = root / cat / "test" / "crack"
        gt = root / cat / "ground_truth" / "crack"
        for d in (good, crack, gt):
            d.mkdir(parents=True)
        for i in range(3):
            save_rgb(good / f"{i:03d}.png", rng)
        for i in range(2):
            save_rgb(crack / f"{i:03d}.png", rng)
        save_mask(gt / "000_mask.png")
        if cat == "widget":
            save_mask(gt / "001_mask.png")
    return root


@pytest.fixture()
def flat_root(tmp_path):
    """Flat layout; normal/b.png is a byte copy of normal/a.png."""
    rng = np.random.default_rng(11)
    root = tmp_path / "shots"
    for sub in ("normal", "anomalous", "masks"):
        (root / sub).mkdir(parents=True)
    save_rgb(root / "normal" / "a.png", rng)
    (root / "normal" / "b.png").write_bytes((root / "normal" / "a.png").read_bytes())
    save_rgb(root / "anomalous" / "x.png", rng)
    save_rgb(root / "anomalous" / "y.png", rng)
    save_mask(root / "masks" / "x.png")
    save_mask(root / "masks" / "y.png", box=(16, 32, 0, 32))
    return root
