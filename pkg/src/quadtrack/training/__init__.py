from .env import TrackingEnv, VecTrackingEnv, reward
from .ppo import PPOTrainer, TrainConfig, train_ppo
from .rma import AdaptationNet, RmaConfig, RmaEstimator, train_rma
