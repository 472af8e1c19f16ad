"""duobeam: dual-process streaming multichannel speech enhancement.

A frame-online front end (recursive dereverberation + MVDR beamforming)
continuously re-steered by posterior statistics published from an
asynchronous block-online source-separation back end.
"""

from .beamformer import (BeamformerConfig, BeamformerState,
                         DegenerateStatistics, accumulate_block, apply_weights,
                         frame_moments, mvdr_weights)
from .evaluation import (SilentReference, grid_search, run_baselines, si_sdr,
                         si_sdr_segments)
from .fastmnmf import (FastMnmfModel, LikelihoodDiverged, PosteriorSnapshot,
                       SingularInitialization, fit, init_model, posterior,
                       posterior_block_mean, publish_snapshot)
from .linalg import SingularMatrix, herm_solve, hermitianize
from .pipeline import (EnhanceResult, PipelineConfig, SnapshotSlot,
                       frontend_pass, precompute_snapshots, run_stream)
from .scenesim import RenderedScene, SceneSpec, default_scene, render
from .steering import SteeringTable, build_steering_table, far_field_steering
from .stft import ChannelLengthMismatch, StftConfig, analyze, synthesize
from .wpe import (BlockTooShort, NumericalDivergence, OnlineWpe, WpeConfig,
                  offline_wpe)

__version__ = "0.1.0"
