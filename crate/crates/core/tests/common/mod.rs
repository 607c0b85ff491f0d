#![allow(dead_code)]

pub mod formats;
pub mod grad_cases;
pub mod gradcheck;
