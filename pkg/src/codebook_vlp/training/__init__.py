from .config import TrainConfig, load_config, parse_config
from .schedule import ScheduleState, lr_at, objective_gate, schedule_at
