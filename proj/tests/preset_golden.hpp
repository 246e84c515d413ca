// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

// Compares a `presets` listing with the hand-transcribed appendix tables in
// golden/appendix_tables.tsv (preset, table, row, value). Returns one message
// per mismatch; `checked` receives the number of golden rows.
inline std::vector<std::string> compare_presets_with_golden(const std::string& listing, const std::string& tsv_path,
                                                            std::size_t& checked) {
    std::vector<std::string> problems;
    std::map<std::string, std::vector<std::string>> blocks;
    std::string current, line;
    std::istringstream in(listing);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] != ' ') current = line.substr(0, line.find(':'));
        else blocks[current].push_back(line);
    }
    std::ifstream golden(tsv_path);
    if (!golden) return {"cannot read " + tsv_path};
    std::map<std::string, std::size_t> expected_rows;
    checked = 0;
    while (std::getline(golden, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        std::string preset, table, label, value;
        std::getline(fields, preset, '\t');
        std::getline(fields, table, '\t');
        std::getline(fields, label, '\t');
        std::getline(fields, value, '\t');
        ++expected_rows[preset];
        ++checked;
        const std::string want = value + "  [appendix Table " + table + "]";
        bool found = false;
        for (const auto& l : blocks[preset]) {
            const std::size_t lp = l.find_first_not_of(' ');
            if (l.compare(lp, label.size(), label) != 0) continue;
            const std::size_t vp = l.find_first_not_of(' ', lp + label.size());
            if (vp == lp + label.size() || vp == std::string::npos) continue;  // longer label sharing a prefix
            if (l.substr(vp) == want) found = true;
        }
        if (!found) problems.push_back(preset + ": row '" + label + "' should read '" + want + "'");
    }
    for (const auto& [preset, n] : expected_rows)
        if (blocks[preset].size() != n)
            problems.push_back(preset + ": " + std::to_string(blocks[preset].size()) + " rows listed, table has " +
                               std::to_string(n));
    return problems;
}
