"""Shallow-encoder / deep-decoder image encryption.

A fixed random shallow network (the key) turns an image into a vector of
floats; a deep network trained by SGD on image/encoding pairs turns it back.
"""

from .codec import load_encodings, load_model, save_encodings, save_model
from .dataset import (PairDataset, build_encoding_pairs, load_image_dir, split_dataset,
                      synthetic_images)
from .decoder import (DecoderModel, StopReason, TrainingConfig, TrainingHistory, decode_image,
                      decoder_forward, init_decoder, train_decoder)
from .encoder import EncoderModel, count_encoder_params, encode_image, init_encoder
from .evaluation import (ReconstructionReport, adversary_attack, baseline_mean_image,
                         evaluate_decoder, psnr)
from .images import ImageRecord, flatten_image, reshape_to_image, resize_image
from .nn import DeterministicRng

__version__ = "0.1.0"
