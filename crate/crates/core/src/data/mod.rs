//! Expression input, preprocessing, covariate design and model initialization.

pub mod design;
pub mod init;
pub mod io;
pub mod pca;
pub mod preprocess;

pub use design::{
    build_design, ColumnKind, ColumnSpec, CovariateTable, DesignEncoding, DesignMatrix,
};
pub use init::{encode_ordinal, initialize, InitOptions};
pub use io::{load_expression, write_expression, ExpressionMatrix, MatrixFormat, SparseCounts};
pub use preprocess::{preprocess, select_hvg, PreprocessReport, TARGET_SUM};
