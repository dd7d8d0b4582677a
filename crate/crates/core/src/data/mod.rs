pub mod assets;
pub mod io;
pub mod schema;
pub mod snapshot;
pub mod split;

pub use assets::{select_top_k_assets, Asset, AssetCriterion};
pub use io::{load_dataset, parse_dataset, read_sidecar, save_dataset};
pub use schema::{FeatureKind, FeatureSchema, FeatureSpec, NormMethod, Normalization, TaskSpec};
pub use snapshot::{Dataset, FeatureValue, Snapshot};
pub use split::{chrono_split, make_folds, train_val_split, DatasetSplit};
