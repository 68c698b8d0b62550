from .model import Tacotron, TtsConfig, attention_is_monotone, mel_mse, train_tts
from .text import Lexicon, detokenize, load_lexicon, phonemize
from .vocoder import griffin_lim, log_mel_to_linear, mel_to_linear

__all__ = [
    "Tacotron", "TtsConfig", "attention_is_monotone", "mel_mse", "train_tts",
    "Lexicon", "detokenize", "load_lexicon", "phonemize",
    "griffin_lim", "log_mel_to_linear", "mel_to_linear",
]
