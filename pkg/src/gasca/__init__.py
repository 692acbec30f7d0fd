"""Stacked convolutional adversarial autoencoders trained layer by layer."""
from .core import LayerSpec, Parameter, SeededRng, ShapeError
from .data import DatasetManifest, PairedDataset, load_idx, split, synth_pose_dataset
from .model import (DiscriminatorStack, GeneratorStack, ShallowAutoencoder, ShallowDiscriminator, StageFactory,
                    stack_discriminator, stack_generator)
from .objectives import LossWeights, combined_generator_loss, discriminator_loss, generator_adversarial_loss
from .trainer import (StageConfig, TrainReport, TrainingAborted, ganglw_train, glw_baseline,
                      joint_train_baseline, train_shallow_pair)

__all__ = [
    "LayerSpec", "Parameter", "SeededRng", "ShapeError",
    "DatasetManifest", "PairedDataset", "load_idx", "split", "synth_pose_dataset",
    "DiscriminatorStack", "GeneratorStack", "ShallowAutoencoder", "ShallowDiscriminator", "StageFactory",
    "stack_discriminator", "stack_generator",
    "LossWeights", "combined_generator_loss", "discriminator_loss", "generator_adversarial_loss",
    "StageConfig", "TrainReport", "TrainingAborted", "ganglw_train", "glw_baseline", "joint_train_baseline",
    "train_shallow_pair",
]

__version__ = "0.1.0"
