from .dataset import (Batcher, DataError, DirectoryDataset, PairedBatch, PairedSample,
                      SyntheticDataset, batcher, collate, synth_pair, write_pair)
from .imageio import ImageIOError, load_image, save_image
from .synthetic import LABEL_PALETTE, SyntheticTaskSpec
