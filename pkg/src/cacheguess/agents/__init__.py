from .policy import (LinearSoftmaxPolicy, Mode, Policy, TabularPolicy, TreePolicy, evaluate, exact_accuracy,
                     load_policy, save_policy)
from .tabular import Hyperparams, TrainReport, train_tabular
from .pg import pg_update, train_pg
from .search import SearchRefused, exhaustive_search, expected_sequences_count, random_search
