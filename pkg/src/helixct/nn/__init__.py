from . import autodiff
from .layers import Conv2d, ResBlock, AdaptiveMixup, ResUNet, adaptive_mixup
from .models import (MPDModel, MIRModel, mpd_forward, mir_forward,
                     sliding_window_apply, baseline_denoise,
                     gaussian_window_weights, apply_mpd_to_stream)
from .training import (Adam, TrainConfig, TrainHistory, train,
                       save_checkpoint, load_checkpoint)
