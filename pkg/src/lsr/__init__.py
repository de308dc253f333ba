"""Latent-space regularization toolkit for unsupervised domain adaptation
in semantic segmentation, at desk scale: histogram-aware label decimation,
smoothed class prototypes, two-pass target pseudo-labeling, shaping losses
with analytic gradients, segmentation metrics including the
adapted-to-supervised ratio, a synthetic domain-shift benchmark and a tiny
deterministic trainer."""

from .core import (ClassSet, LabelMap, LatentFeatureMap, add, dot, l1norm, l2norm,
                   load_feature_map, load_image, load_label_map, make_rng, mul,
                   save_feature_map, save_image, save_label_map, scale, softmax, sub)
from .decimation import DecimationConfig, class_frequency_weights, decimate
from .gradcheck import GradCheckReport, check, run_all, run_loss_check
from .losses import (LossBundle, LossWeights, clustering_loss, entropy_min_loss,
                     norm_alignment_loss, norm_filter, perpendicularity_loss,
                     total_loss, weighted_cross_entropy)
from .metrics import (ClassReport, confusion_and_iou, confusion_matrix, iou_from_confusion,
                      label_histogram, masr, mean_channel_entropy, mean_inter_prototype_angle,
                      mean_iou, read_iou_csv)
from .prototypes import FeatureSet, PrototypeBank, batch_centroid, gather_class_features
from .pseudolabel import PseudoLabelConfig, soft_assign, two_pass_label
from .synth import (PERTURBATION_FAMILIES, Perturbation, SceneConfig, build_dataset,
                    default_palette, generate_scene, load_manifest, perturb, shift_domain)
from .trainer import (Dataset, NetConfig, OptimConfig, TinySegNet, TrainSettings,
                      load_checkpoint, run_regime, save_checkpoint, sgd_step)

__version__ = "0.1.0"
