from affinity_lab.guidance.corrector import corrector_relax, physical_energy
from affinity_lab.guidance.guided import (
    guidance_active,
    guidance_coefficient,
    guided_sample,
    guided_vector_field,
)
