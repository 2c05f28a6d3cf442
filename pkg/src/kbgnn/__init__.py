"""Kernel-based graph neural network for next-POI CTR prediction."""

from .backend import NAME as BACKEND
from .consistency import MemoryBank, consistency_loss, similarity_distribution
from .data import (CheckinSequence, CtrExample, DatasetSplit, PoiRecord, load_dataset, make_split,
                   parse_foursquare, read_foursquare, sample_negatives, save_dataset)
from .evaluate import EvalReport, evaluate
from .graphs import (GeoGraph, UserSeqGraph, build_geo_graph, build_seq_graph, haversine_km,
                     load_geo_graph, save_geo_graph)
from .metrics import auc, logloss
from .model import KBGNN, TrainConfig, load_checkpoint, predict_ctr, rec_loss, save_checkpoint, train

__version__ = "0.1.0"
