"""Sequential knowledge-transfer training for fine-grained classification:
spatial attention maps as the knowledge carrier, an orthogonality loss that
pushes each new model toward regions its predecessors ignored, and ensemble
inference by output averaging.
"""

from .tensor import Tensor, Tape, backward
from .attention import AttentionMap, spatial_attention, normalize, teacher_map, student_map
from .losses import LossBreakdown, or_loss, total_loss
from .backbone import BackboneConfig, Model, init_model, save_checkpoint, load_checkpoint
from .trainer import TrainRunConfig, train_sequence, sgd_step, cosine_lr
from .evaluate import EnsembleResult, ensemble_predict, top1_accuracy, attention_overlap

__version__ = "0.1.0"
