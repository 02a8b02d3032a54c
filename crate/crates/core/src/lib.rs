pub mod annotation;
pub mod extract;
pub mod tokenize;
pub mod visible;
pub mod dedup;
pub mod knn;
pub mod embed;
pub mod io;
pub mod typecluster;
pub mod model;
pub mod metrics;
pub mod pipeline;
