"""Differentially private Euclidean k-means: centralized pipeline, local-model
protocol, and private coresets, with a CLI experiment harness."""

from .budget import BudgetLedger, LedgerEntry, PrivacyBudget
from .core import (CandidateSet, CenterSet, Dataset, WeightedDataset, cost,
                   kmeanspp_lloyd, nearest, opt_over_candidates, weighted_cost)
from .candidates import (DiscoveryKnobs, PeelSchedule, lsh_procedure, peel,
                         private_centers, private_k_means_candidates)
from .coreset import Coreset, centralized_coreset, coreset_check, ldp_coreset
from .harness import ExperimentConfig, generate_mixture, ingest, run_experiment, write_points
from .ldp import (LdpKnobs, LdpTranscript, PublicRandomness, grouphist_aggregate,
                  grouphist_group_query, grouphist_randomize, ldp_good_center,
                  ldp_k_means)
from .lsh import LshParams, bucket, collision_probability_estimate, sample_lsh
from .mechanisms import (NoiseSpec, gaussian_noise_vector, laplace_noise_vector,
                         noisy_average, randomized_response_bit)
from .selection import (CostOracle, best_swap_bruteforce, noisy_local_search,
                        private_local_search)

__version__ = "0.1.0"
