#![allow(dead_code)]

pub mod grad_suite;
pub mod gradcheck;
pub mod model_grad;
