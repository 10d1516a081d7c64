pub mod corpus;
pub mod scorer;
pub mod difficulty;
pub mod parallel;
pub mod quality;
pub mod selection;
pub mod pipeline;
pub mod report;
