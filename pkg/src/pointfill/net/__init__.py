from .config import DenoiserConfig, config_from_json, preset
from .params import init_params, param_shapes, params_from_arrays
from .denoiser import (
    CondContext,
    RefineOut,
    cgnet_forward,
    counters,
    denoise_forward,
    encode_condition,
    reset_counters,
    rfnet_forward,
)
from .modules import (
    attention_aggregate,
    encode_step,
    extract_global_feature,
    fp_forward,
    ft_forward,
    positional_step_code,
    sa_forward,
)
