#![allow(dead_code)]

pub mod criteria;
pub mod grad_suite;
