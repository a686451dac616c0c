"""Linear attention, GLA, ABC and GSA kernels in recurrent and chunkwise forms."""

from .chunk import chunk_cumsum, chunk_states, gla_chunkwise_bwd, gla_chunkwise_fwd
from .gsa import GsaGrads, GsaSaved, abc_fwd, abc_two_pass, final_state, gsa_bwd, gsa_fwd
from .links import LINKS, check_link, link_bwd, link_fwd
from .recurrent import (
    abc_recurrent,
    abc_write_strengths,
    abc_write_strengths_bwd,
    gla_recurrent,
    gsa_recurrent,
    gsa_recurrent_bwd,
    la_recurrent,
    retnet_style_decay,
    softmax_attention_ref,
)
from .types import LOG_GATE_FLOOR, ChunkSpec, GateSide, GsaState, KernelInput, clamp_log_gate
