#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "eigr/eigr.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace eigr;

namespace {

struct Run {
    std::string command;
    EngineConfig config;
    Timings timings;
    std::vector<std::string> outputs;

    fs::path out_dir() const { return fs::path(config.out_dir); }

    std::ofstream open(const std::string& name) {
        fs::create_directories(out_dir());
        outputs.push_back(name);
        std::ofstream out(out_dir() / name);
        if (!out) throw InvalidConfig("cannot write " + (out_dir() / name).string());
        return out;
    }

    /// Config hash and timings live here so the reports themselves stay
    /// byte-identical across reruns.
    void write_manifest() {
        nlohmann::ordered_json j;
        j["command"] = command;
        char hash[17];
        std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(config_hash(config)));
        j["config_hash"] = hash;
        j["seed"] = config.seed;
        for (const auto& key : config_keys()) j["config"][key.name] = key.get(config);
        j["timings"] = nlohmann::ordered_json::object();
        for (const auto& [stage, secs] : timings.stages) j["timings"][stage] = secs;
        j["outputs"] = outputs;
        fs::create_directories(out_dir());
        std::ofstream out(out_dir() / "manifest.json");
        out << j.dump(2) << '\n';
    }
};

void merge(Timings& into, const Timings& from, const std::string& prefix = "") {
    for (const auto& [stage, secs] : from.stages) into.add(prefix + stage, secs);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (!part.empty()) out.push_back(part);
    }
    return out;
}

std::vector<std::size_t> test_items(const Engine& e) {
    std::vector<std::size_t> items;
    for (const auto& tc : test_cases(e.split)) items.push_back(tc.item);
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    return items;
}

void cmd_ingest(Run& run) {
    const Engine e = prepare_engine(run.config);
    merge(run.timings, e.timings);
    {
        auto out = run.open("interactions.csv");
        write_interactions(e.dataset, out);
    }
    {
        auto out = run.open("members.csv");
        write_memberships(e.dataset, out);
    }
    {
        auto out = run.open("group_tags.csv");
        write_tags(e.dataset.group_tags, out);
    }
    {
        auto out = run.open("item_tags.csv");
        write_tags(e.dataset.item_tags, out);
    }
    {
        auto out = run.open("greg.csv");
        out << "src_group,dst_group,weight\n";
        for (const auto& edge : e.greg.edges) {
            out << e.catalog.group_id(edge.u) << ',' << e.catalog.group_id(edge.v) << ',' << edge.weight << '\n';
        }
    }
    std::cout << e.catalog.num_groups() << " groups, " << e.catalog.num_items() << " items, " << e.greg.edges.size()
              << " group edges, " << e.split.test_set.size() << " held-out events\n";
}

void cmd_train(Run& run) {
    Engine e = prepare_engine(run.config);
    train_engine(e);
    compute_influence(e);
    merge(run.timings, e.timings);
    e.config.use_index = false;
    save_engine(e, run.out_dir());
    run.outputs.insert(run.outputs.end(), {"model.bin", "influence.csv"});
    if (!e.subgraphs.empty()) {
        auto out = run.open("subgraphs.csv");
        write_subgraphs_csv(e.subgraphs, e.greg, e.catalog, out);
    }
    std::cout << "trained on " << e.split.num_snapshots() << " snapshots"
              << (run.config.use_ges ? " (sampled subgraphs)" : "") << "\n";
}

void cmd_build_index(Run& run) {
    EngineConfig c = run.config;
    c.use_index = false;
    Engine e = load_engine(c, run.out_dir());
    e.config.use_index = true;
    build_engine_index(e);
    merge(run.timings, e.timings);
    std::ofstream out(run.out_dir() / "index.bin", std::ios::binary);
    save_index(e.index, out);
    run.outputs.push_back("index.bin");
    std::cout << "indexed " << e.index.size() << " groups in " << e.index.blocks.size() << " blocks\n";
}

void cmd_recommend(Run& run, const std::string& items_arg) {
    const Engine e = load_engine(run.config, run.out_dir());
    merge(run.timings, e.timings);
    std::vector<std::size_t> items;
    if (items_arg.empty()) {
        items = test_items(e);
    } else {
        for (const auto& id : split_list(items_arg)) items.push_back(e.catalog.item_index(id));
    }
    const auto batch = recommend_stream(e, items, run.config.k);
    merge(run.timings, batch.timings, "recommend_");
    auto out = run.open("recommendations.csv");
    write_recommendations_csv(batch, e.catalog, out);
    std::cout << items.size() << " items, " << batch.distinct_keys << " distinct keys\n";
}

void cmd_simulate(Run& run, const std::string& item_arg, const std::string& seeds_arg) {
    const Engine e = load_engine(run.config, run.out_dir());
    merge(run.timings, e.timings);
    const std::size_t item = item_arg.empty() ? test_items(e).at(0) : e.catalog.item_index(item_arg);
    std::vector<std::size_t> seeds;
    if (seeds_arg.empty()) {
        const std::size_t one[] = {item};
        const auto batch = recommend_stream(e, one, run.config.k);
        for (const auto& [g, score] : batch.lists[0].groups) {
            seeds.push_back(e.catalog.group_index(g));
        }
    } else {
        for (const auto& id : split_list(seeds_arg)) seeds.push_back(e.catalog.group_index(id));
    }
    const auto graph = run.timings.time("diiprog", [&] {
        return build_diiprog(e.greg, e.model.group_embedding, e.model.item_embedding.row(item), item, e.config.dyic,
                             e.split);
    });
    {
        auto out = run.open("diiprog.csv");
        write_diiprog_csv(graph, e.catalog, out);
    }
    auto out = run.open("simulation.csv");
    bool header = true;
    double total = 0.0;
    run.timings.time("simulate", [&] {
        for (std::size_t g : seeds) {
            const std::size_t one[] = {g};
            const auto spreads = simulate_replications(graph, one, e.config.dyic, 0x51A000 + g);
            write_simulation_csv(e.catalog.group_id(g), spreads, out, header);
            header = false;
            for (std::size_t s : spreads) total += static_cast<double>(s);
        }
    });
    const double runs = static_cast<double>(seeds.size() * e.config.dyic.replications);
    std::cout << "item " << e.catalog.item_id(item) << ": mean spread " << (runs > 0 ? total / runs : 0.0)
              << " over " << seeds.size() << " seed groups\n";
}

void cmd_evaluate(Run& run) {
    const Engine e = build_engine(run.config);
    merge(run.timings, e.timings);
    const auto report = evaluate(e);
    merge(run.timings, report.timings);
    {
        auto out = run.open("report.csv");
        write_report_csv(report, out);
    }
    {
        auto out = run.open("metrics_table.csv");
        write_metrics_table(report, out);
    }
    {
        auto out = run.open("timings.csv");
        write_timings_csv(run.timings, out);
    }
    for (std::size_t i = 0; i < report.ks.size(); ++i) {
        std::cout << "HR@" << report.ks[i] << " " << report.hr[i] << "  NDCG@" << report.ks[i] << " " << report.ndcg[i]
                  << '\n';
    }
    std::cout << "sigma_inf " << report.sigma_inf << " over " << report.num_items << " items\n";
}

void cmd_stats(Run& run) {
    const Engine e = prepare_engine(run.config);
    merge(run.timings, e.timings);
    const auto s = compute_stats(e.dataset);
    auto out = run.open("stats.csv");
    out << "users,items,groups,interactions,avg_items_per_group,avg_groups_per_user,group_edges\n";
    out << s.users << ',' << s.items << ',' << s.groups << ',' << s.interactions << ','
        << detail::format_double(s.avg_items_per_group) << ',' << detail::format_double(s.avg_groups_per_user) << ','
        << e.greg.edges.size() << '\n';
    std::cout << "users " << s.users << "\nitems " << s.items << "\ngroups " << s.groups << "\ninteractions "
              << s.interactions << "\navg items/group " << s.avg_items_per_group << "\navg groups/user "
              << s.avg_groups_per_user << "\ngroup edges " << e.greg.edges.size() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Influence-aware group recommendation engine"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    bool no_ges = false, no_dyic = false, no_index = false;
    app.add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
    app.add_flag("--no-ges", no_ges, "train on the full group graph");
    app.add_flag("--no-dyic", no_dyic, "drop the influence term from relevance");
    app.add_flag("--no-index", no_index, "score every group exactly");
    std::map<std::string, std::optional<std::string>> overrides;
    for (const auto& key : config_keys()) {
        app.add_option("--" + key.name, overrides[key.name], key.help)->group("Settings");
    }

    std::string items_arg, item_arg, seeds_arg;
    auto* ingest = app.add_subcommand("ingest", "load or generate the corpus and write it as CSV");
    auto* train = app.add_subcommand("train", "train the temporal model and influence scores");
    auto* build_index_cmd = app.add_subcommand("build-index", "build the index from a trained model");
    auto* recommend = app.add_subcommand("recommend", "top-k groups for a stream of items");
    recommend->add_option("--items", items_arg, "comma-separated item ids (default: held-out items)");
    auto* simulate = app.add_subcommand("simulate", "cascade simulation for one item");
    simulate->add_option("--item", item_arg, "item id (default: first held-out item)");
    simulate->add_option("--seeds", seeds_arg, "comma-separated seed groups (default: the item's top-k)");
    auto* evaluate_cmd = app.add_subcommand("evaluate", "full run with HR, NDCG and sigma_inf");
    auto* stats = app.add_subcommand("stats", "dataset statistics");

    CLI11_PARSE(app, argc, argv);

    try {
        Run run;
        run.config = config_path.empty() ? EngineConfig{} : load_config(config_path);
        for (const auto& key : config_keys()) {
            if (overrides[key.name]) key.set(run.config, *overrides[key.name]);
        }
        if (no_ges) run.config.use_ges = false;
        if (no_dyic) run.config.use_dyic = false;
        if (no_index) run.config.use_index = false;
        run.config.validate();
        run.command = app.get_subcommands().front()->get_name();

        if (ingest->parsed()) cmd_ingest(run);
        if (train->parsed()) cmd_train(run);
        if (build_index_cmd->parsed()) cmd_build_index(run);
        if (recommend->parsed()) cmd_recommend(run, items_arg);
        if (simulate->parsed()) cmd_simulate(run, item_arg, seeds_arg);
        if (evaluate_cmd->parsed()) cmd_evaluate(run);
        if (stats->parsed()) cmd_stats(run);
        run.write_manifest();
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
