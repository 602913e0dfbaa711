//! Load the bundled instrument taxonomy, shorten it and query LCA heights.
use metaproto::tree::load_tree;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tree = load_tree("bundled:hornbostel_sachs")?;
    println!("height {} with {} leaves", tree.height(), tree.leaf_count());

    let (violin, viola, snare) = (tree.leaf("violin").unwrap(), tree.leaf("viola").unwrap(), tree.leaf("snare drum").unwrap());
    println!("lca(violin, viola) = {}", tree.lca_height(violin, viola)?);
    println!("lca(violin, snare) = {}", tree.lca_height(violin, snare)?);

    for h in (1..=tree.height()).rev() {
        let groups = tree.shorten_to_height(h)?.level_nodes(1).len();
        println!("H={h}: {groups} parents of leaves");
    }

    // leaf swaps keep the shape but scramble which leaves share a parent
    let random = tree.shorten_to_height(1)?.random_swap_tree(7, 10);
    for group in random.level_nodes(1) {
        let kids: Vec<&str> = random.node(group).children.iter().take(4).map(|&c| random.node(c).name.as_str()).collect();
        println!("{}: {kids:?} ...", random.node(group).name);
    }
    Ok(())
}
