from affinity_lab.world.sequences import (
    ALPHABET,
    LINKER_UNIT,
    NUM_RESIDUE_TYPES,
    ComplexLayout,
    ResidueType,
    Sequence,
    make_complex,
)
from affinity_lab.world.tables import WorldTables, load_tables
from affinity_lab.world.oracle import (
    Structure,
    apply_noise,
    contact_energy,
    docked_structure,
    fold_batch,
    noisy_binding_energy,
    oracle_binding_energies,
    oracle_binding_energy,
    oracle_ensemble_sample,
    oracle_mean_structure,
)
