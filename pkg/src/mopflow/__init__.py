"""Motion segmentation from variational optical flow.

Dense flow comes from directly minimising a Charbonnier energy, moving-object
proposals from the flow magnitude, and an optional refinement from a small
encoder-decoder that upsamples with stored pooling indices.
"""
from .evaluation import BASELINES, EvalReport, evaluate_dataset, evaluate_sequence, iou
from .flow_energy import EnergyConfig, data_term, energy_gradient, smoothness_term, total_energy
from .flow_solver import SolverConfig, estimate_flow, occlusion_mask, solve_bidirectional, solve_pyramid
from .mop import MopConfig, flow_to_color, segment_flow

__version__ = "0.1.0"
