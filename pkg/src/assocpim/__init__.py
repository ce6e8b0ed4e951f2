"""Associative processing-in-memory simulator for sparse fully-connected layers."""
from .acsr import AcsrImage, FieldMap, SparseMatrix, build_field_map, decode_image, encode_acsr, load_image
from .ap_core import ApContractError, ApState, CycleCounters, KeyMask, create_ap
from .cost_model import CostConstants, Estimates, estimate_area, estimate_energy, estimate_throughput
from .fc_engine import (
    ActivationList,
    LayerConfig,
    LayerResult,
    reference_layer,
    reference_network,
    run_layer,
    run_network,
)

__version__ = "0.1.0"
