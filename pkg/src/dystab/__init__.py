"""Unsupervised object segmentation by dynamic-static bootstrapping.

A motion segmenter (phi) is trained against a flow inpainter (psi) so that
the motion inside its mask cannot be predicted from the motion outside; a
single-image segmenter (chi) is distilled from phi's confident masks; the two
then reinforce each other over a few rounds. Everything runs on numpy.
"""
from .bootstrap import BootstrapState, fuse_predictions, loss_J, run_bootstrap
from .config import ConfigError, TrainConfig
from .dynamic import confidence, loss_A, loss_D, loss_TC, make_phi, make_psi, train_dynamic
from .experiments import ablation_confidence, ablation_tc, growing_corpus_study
from .flow import estimate_flow, flow_to_color, occlusion_map, read_flo, warp, write_flo
from .metrics import miou
from .nn import InpaintNet, ParamStore, SegNet
from .static import PseudoLabel, SnapshotTeacher, f_measure, loss_chi, make_chi, segment_static, train_static
from .synthdata import SceneSpec, generate_corpus, generate_sequence

__version__ = "0.1.0"
