"""Semantic-guided indoor scene recognition at desk scale.

Pipeline: adaptive confidence filtering of semantic score tensors, surrogate
conv backbones for the score and image branches, object-wise masked feature
aggregation, global-local attention dependency modeling, and a two-stage
training protocol with an adaptive-step optimizer, all over a deterministic
synthetic corpus generator with oracle-verified numerics.
"""

from .aggregation import (SemanticSequence, aggregate, aggregate_pair,
                          downsample_labels, masked_average)
from .backbones import (BackboneConfig, ChamParams, FeatureGrid, align_spatial,
                        baseline_head, cham, default_backbone_config,
                        ifem_forward, init_backbone, ssrm_forward)
from .errors import (ArgumentError, ConfigError, DataError, DimensionError,
                     NumericsError, ParseError, SpacoError)
from .fileio import (Checkpoint, Manifest, RunConfig, load_checkpoint,
                     load_run_config, parse_run_config, read_manifest,
                     read_tensor, save_checkpoint, write_manifest, write_tensor)
from .filtering import (BinaryMask, LabelMap, ScoreTensor, acf, argmax_labels,
                        binary_map)
from .gldm import (AttentionBlockParams, AttentionRecord, ExtendedSequence,
                   GldmParams, add_positional, decoder_block, encoder_block,
                   extend_with_global, extract_global_node, gldm_forward,
                   init_gldm, merge_max, msa)
from .numerics import (FLOAT, LABEL, STORAGE, Node, Parameter, RngState,
                       backward, bilinear_resize, dropout, grad_check,
                       nearest_resize_labels)
from .recognition import (ClassifierHead, classify, cross_entropy,
                          init_head, top1_accuracy)
from .scenes import (SampleRecord, SceneSpec, default_scene_spec,
                     generate_dataset, render_sample, sample_rng)
from .training import (Model, Sample, alig_step, ablation_suite, evaluate,
                       load_samples, restore_model, train_stage1, train_stage2)

__version__ = "0.1.0"
