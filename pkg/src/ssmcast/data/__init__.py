from ssmcast.data.io import (
    read_events,
    read_json,
    read_records,
    write_events,
    write_json,
    write_records,
)
from ssmcast.data.preprocess import (
    apply_normalization,
    channel_dictionary,
    discretize,
    fit_normalization,
    fnv1a64,
    impute_interventions,
    impute_observations,
    intervention_gap_thresholds,
    invert_normalization,
    nearest_rank,
    patient_seed,
    prepare_records,
    split_by_hash,
)
from ssmcast.data.records import (
    INT,
    OBS,
    DataFormatError,
    Event,
    EventStream,
    NormalizationStats,
    PatientRecord,
    UnknownChannelError,
)
from ssmcast.data.simulate import GroundTruth, NonlinearParams, SyntheticConfig, simulate, true_params

__all__ = [
    "INT", "OBS", "DataFormatError", "Event", "EventStream", "GroundTruth", "NonlinearParams",
    "NormalizationStats", "PatientRecord", "SyntheticConfig", "UnknownChannelError",
    "apply_normalization", "channel_dictionary", "discretize", "fit_normalization", "fnv1a64",
    "impute_interventions", "impute_observations", "intervention_gap_thresholds",
    "invert_normalization", "nearest_rank", "patient_seed", "prepare_records", "read_events",
    "read_json", "read_records", "simulate", "split_by_hash", "true_params", "write_events",
    "write_json", "write_records",
]
