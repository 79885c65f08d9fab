"""Attribute refiners: geometry size (GRM), position/heading (PRM), and
confidence (CRM), with losses, training loops and the track orchestrator."""

from offtrack.refine.anchors import SizeAnchorTable, fit_size_anchors
from offtrack.refine.apply import (RefinerSet, export_score,
                                   refine_or_passthrough, refine_track)
from offtrack.refine.heading import CODEC, HeadingBinCodec
from offtrack.refine.labels import (IGNORE, NEGATIVE, POSITIVE, CrmLabelRule,
                                    ScorePair, crm_labels, fuse_score,
                                    mean_best_iou)
from offtrack.refine.losses import crm_loss, grm_loss, prm_loss, prm_targets
from offtrack.refine.models import (CRM_ARCH, GRM_ARCH, PRM_ARCH,
                                    ConfidenceRefiner, GeometryRefiner,
                                    PositionRefiner, load_refiner, save_refiner)
from offtrack.refine.train import (CrmExample, GrmExample, PrmExample,
                                   TrainHyper, TrainResult,
                                   anchors_from_examples, build_crm_corpus,
                                   build_grm_corpus, build_prm_corpus,
                                   train_crm, train_grm, train_prm)

__all__ = [
    "SizeAnchorTable", "fit_size_anchors", "HeadingBinCodec", "CODEC",
    "CrmLabelRule", "ScorePair", "crm_labels", "fuse_score", "mean_best_iou",
    "POSITIVE", "NEGATIVE", "IGNORE",
    "grm_loss", "prm_loss", "prm_targets", "crm_loss",
    "GeometryRefiner", "PositionRefiner", "ConfidenceRefiner",
    "GRM_ARCH", "PRM_ARCH", "CRM_ARCH", "save_refiner", "load_refiner",
    "RefinerSet", "refine_track", "refine_or_passthrough", "export_score",
    "TrainHyper", "TrainResult", "GrmExample", "PrmExample", "CrmExample",
    "train_grm", "train_prm", "train_crm",
    "build_grm_corpus", "build_prm_corpus", "build_crm_corpus",
    "anchors_from_examples",
]
