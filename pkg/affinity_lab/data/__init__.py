from affinity_lab.data.dataset import (
    ComplexSample,
    Registry,
    ToyDataset,
    generate_dataset,
    read_csv,
    sample_complex_corpus,
    write_csv,
)
