"""Classical Ewald/P3M electrostatics and a graph/mesh neural potential."""

from .geometry import (
    AtomSystem,
    BipartiteGraph,
    GeometryError,
    RadiusGraph,
    build_assignment_graph,
    build_radius_graph,
    minimum_image_displacement,
)
from .cellmesh import (
    CanonicalFrame,
    Mesh,
    canonical_frame,
    choose_mesh_counts,
    construct_cell,
    generate_mesh,
)
from .ewald import (
    ElectrostaticsError,
    EnergyBreakdown,
    EwaldParams,
    direct_coulomb,
    direct_periodic,
    ewald_components,
    extrapolate_shells,
    tune_params,
)
from .p3m import ChargeAssignment, GridField, assign_charges, p3m_total
from .spectral import SpectralGrid, dense_fft3, dense_ifft3, fft3, ifft3
from .autodiff import AdamW, AutodiffError, Tensor, backward, no_grad
from .model import (
    ModelConfig,
    ModelError,
    NeuralP3M,
    init_weights,
    n_parameters,
    prepare_batch,
)
from .data import (
    DataError,
    DatasetRecord,
    ParseError,
    generate_synthetic,
    load_dataset,
    parse_structure,
    save_dataset,
    split,
    write_structure,
)
from .train import TrainConfig, TrainError, evaluate, load_config, train

__version__ = "0.1.0"
