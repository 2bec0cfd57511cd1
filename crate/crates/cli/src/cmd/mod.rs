pub mod classify;
pub mod data;
pub mod model;
pub mod review;
pub mod run;
