from .checkpoint import load_checkpoint, save_checkpoint
from .core import ForwardTrace, ModelConfig, backward, forward, init_params, nll_loss, rit_encode
from .layers import cross_attention, self_attention
from .train import TrainConfig, greedy_decode, predict, train
from .vocab import Vocab, build_vocab, detokenize, tokenize
