from . import flags
from .encoder import EncoderConfig, GridEncoder
from .flags import get_trace, tracing
from .motif import MotifConfig, MotifOutput, MotifRefinementModel
from .triple_decoder import (
    DECODERS,
    DecoderConfig,
    IterativeSceneGraphModel,
    MissingPrerequisiteError,
    PredictionSet,
    TripletHypothesis,
    prefix_state_dict,
)
