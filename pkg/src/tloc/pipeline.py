"""Glue between config values and the library modules: labeling, model
construction, and the end-to-end train/eval runs the CLI exposes."""

from __future__ import annotations

import numpy as np

from . import cells as gc
from . import synth
from .model import DualBranchModel, ModelConfig
from .synth import Dataset, WorldSpec
from .train import (
    AugmentConfig,
    LabeledData,
    LossWeights,
    NumericError,
    OptimConfig,
    train,
)


def world_spec_from_config(cfg: dict) -> WorldSpec:
    return WorldSpec(
        seed=cfg["world.seed"],
        n_locations=cfg["world.n_locations"],
        n_clusters=cfg["world.n_clusters"],
        samples_per_location=cfg["world.samples_per_location"],
        image_size=cfg["world.image_size"],
        n_seg_classes=cfg["world.n_seg_classes"],
        n_scene_classes=cfg["world.n_scene_classes"],
        layout_blocks=cfg["world.layout_blocks"],
        jitter=cfg["world.jitter"],
        shift_strength=cfg["world.shift_strength"],
        gps_noise_km=cfg["world.gps_noise_km"],
        cluster_radius_km=cfg["world.cluster_radius_km"],
        min_cluster_sep_km=cfg["world.min_cluster_sep_km"],
        min_location_sep_km=cfg["world.min_location_sep_km"],
        n_train=cfg["world.n_train"],
        n_val=cfg["world.n_val"],
        n_test=cfg["world.n_test"],
    )


def build_index_from_config(ds: Dataset, cfg: dict) -> gc.CellIndex:
    return gc.build_index(
        ds.coords(),
        min_images=cfg["cells.min_images"],
        max_images=(cfg["cells.max_coarse"], cfg["cells.max_middle"], cfg["cells.max_fine"]),
        max_depth=cfg["cells.max_depth"],
    )


def label_dataset(ds: Dataset, index: gc.CellIndex):
    """Per-level class ids plus the mask of samples assigned at every level."""
    labels = {
        level: gc.locate_many(index, ds.lat, ds.lon, level) for level in gc.LEVELS
    }
    labels["scene"] = ds.scene.astype(np.int64)
    assigned = np.ones(len(ds), dtype=bool)
    for level in gc.LEVELS:
        assigned &= labels[level] != gc.UNASSIGNED
    return labels, assigned


def labeled_subset(ds: Dataset, index: gc.CellIndex) -> LabeledData:
    """Training view: samples unassigned at any level are excluded."""
    labels, assigned = label_dataset(ds, index)
    idx = np.nonzero(assigned)[0]
    return LabeledData(
        rgb=ds.rgb[idx], seg=ds.seg[idx],
        labels={k: v[idx] for k, v in labels.items()},
    )


def model_config_from(cfg: dict, index: gc.CellIndex, ds: Dataset,
                      branches: str | None = None, mff: bool | None = None,
                      scene_head: bool | None = None) -> ModelConfig:
    return ModelConfig(
        image_size=ds.rgb.shape[-1],
        patch_size=cfg["model.patch_size"],
        embed_dim=cfg["model.embed_dim"],
        depth=cfg["model.depth"],
        heads=cfg["model.heads"],
        ffn_dim=cfg["model.ffn_dim"],
        branches=branches if branches is not None else cfg["model.branches"],
        mff=mff if mff is not None else cfg["model.mff"],
        attentive_fusion=cfg["model.attentive_fusion"],
        scene_head=scene_head if scene_head is not None else cfg["model.scene_head"],
        seg_encoding=cfg["model.seg_encoding"],
        seg_channels=cfg["model.seg_channels"],
        n_seg_classes=ds.n_seg_classes,
        k_coarse=index.coarse.n_cells,
        k_middle=index.middle.n_cells,
        k_fine=index.fine.n_cells,
        k_scene=ds.n_scene_classes,
    )


def optim_config_from(cfg: dict) -> OptimConfig:
    return OptimConfig(
        base_lr=cfg["train.lr"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        epochs=cfg["train.epochs"],
        warmup_epochs=cfg["train.warmup_epochs"],
        batch_size=cfg["train.batch_size"],
    )


def augment_config_from(cfg: dict) -> AugmentConfig:
    return AugmentConfig(
        horizontal_flip_prob=cfg["train.flip_prob"],
        brightness=cfg["train.brightness"],
        contrast=cfg["train.contrast"],
        saturation=cfg["train.saturation"],
        hue=cfg["train.hue"],
        jitter_prob=cfg["train.jitter_prob"],
    )


def loss_weights_from(cfg: dict) -> LossWeights:
    return LossWeights(cfg["train.alpha"], cfg["train.beta"], cfg["train.gamma"])


def run_training(cfg: dict, train_ds: Dataset, val_ds: Dataset, index: gc.CellIndex,
                 branches: str | None = None, mff: bool | None = None,
                 scene_head: bool | None = None, metrics_path: str | None = None,
                 log=None) -> tuple[DualBranchModel, list[dict]]:
    """Build a fresh model from config and train it; returns the model loaded
    with its best-validation parameters."""
    seed = cfg["world.seed"]
    model = DualBranchModel(
        model_config_from(cfg, index, train_ds, branches, mff, scene_head),
        rng=synth.substream(seed, synth.STREAM_INIT),
    )
    train_data = labeled_subset(train_ds, index)
    val_data = labeled_subset(val_ds, index)
    try:
        best_params, rows = train(
            model, train_data, val_data,
            optim_config_from(cfg), loss_weights_from(cfg), augment_config_from(cfg),
            shuffle_rng=synth.substream(seed, synth.STREAM_SHUFFLE),
            augment_rng=synth.substream(seed, synth.STREAM_AUGMENT),
            metrics_path=metrics_path, log=log,
        )
    except NumericError as exc:
        # train() already restored the last-good parameters onto the model
        exc.model = model
        raise
    for name, arr in best_params.items():
        model.params[name].data = arr
    return model, rows
