from .run import Global
from .engine import numerics, model, masking, kvcache, decoding, checkpoint
from .adapt import schedule, distill, harness
from .analysis import attention_stats, costmodel, latency
