//! Every example runs to completion.

#[path = "../examples/evaluate.rs"]
mod evaluate;
#[path = "../examples/inversion.rs"]
mod inversion;
#[path = "../examples/mine.rs"]
mod mine;
#[path = "../examples/pretrain_a2.rs"]
mod pretrain_a2;
#[path = "../examples/sweep.rs"]
mod sweep;
#[path = "../examples/view_cache.rs"]
mod view_cache;
#[path = "../examples/w_perturb.rs"]
mod w_perturb;
#[path = "../examples/w_search.rs"]
mod w_search;

#[test]
fn losses_example() {
    losses::run().unwrap();
}

#[test]
fn w_search_example() {
    w_search::run().unwrap();
}

#[test]
fn w_perturb_example() {
    w_perturb::run().unwrap();
}

#[test]
fn inversion_example() {
    inversion::run().unwrap();
}

#[test]
fn view_cache_example() {
    view_cache::run().unwrap();
}

#[test]
fn pretrain_a2_example() {
    pretrain_a2::run().unwrap();
}

#[test]
fn evaluate_example() {
    evaluate::run().unwrap();
}

#[test]
fn mine_example() {
    mine::run().unwrap();
}

#[test]
fn sweep_example() {
    sweep::run().unwrap();
}
