from .model import (
    ArchitectureDescriptor,
    Model,
    backward,
    forward,
    init_model,
    layer_specs,
    loss_and_grads,
    micro,
    preset,
    resnet50,
    softmax,
    weighted_ce,
)
from .optim import AdamState, adam_step
from .serialize import load_model, save_model
from .train import TrainConfig, predict, predict_batch, prepare_input, select_epoch, train
